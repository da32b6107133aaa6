use std::fs;
use std::path::Path;

use qmf_core::data::{self, NoiseSpec, SyntheticSpec};
use qmf_core::diffcore::Matrix;
use qmf_core::experiment::{DatasetSource, ExperimentConfig};
use qmf_core::stats;
use sha2::{Digest, Sha256};

const FIXTURE_SHA256: &str = "105cd18cee5bdbda63bfdc839840ae3c6a0e69f240a2f703c735da716bfc6629";
const FIXTURE_FILES: [&str; 4] = ["manifest.json", "modality_0.csv", "modality_1.csv", "labels.csv"];

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

fn digest(dir: &Path) -> String {
    let mut h = Sha256::new();
    for f in FIXTURE_FILES {
        h.update(fs::read(dir.join(f)).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn fixture_spec() -> SyntheticSpec {
    let cfg = ExperimentConfig::load(&fixtures().join("clean_config.json")).unwrap();
    match cfg.dataset {
        DatasetSource::Synthetic(s) => s,
        DatasetSource::Path(_) => unreachable!(),
    }
}

#[test]
fn fixture_checksum_and_regeneration() {
    let dir = fixtures().join("clean");
    assert_eq!(digest(&dir), FIXTURE_SHA256);

    let fresh = data::generate(&fixture_spec()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    data::save(&fresh, tmp.path()).unwrap();
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), fresh.num_modalities() + 2);
    assert_eq!(digest(tmp.path()), FIXTURE_SHA256);

    let loaded = data::load(&dir).unwrap();
    assert_eq!(loaded.modalities(), fresh.modalities());
    assert_eq!(loaded.labels(), fresh.labels());
}

/// Linear discriminant analysis with pooled covariance, fitted in closed form.
struct Lda {
    coef: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

impl Lda {
    fn fit(x: &Matrix, y: &[usize], k: usize) -> Self {
        let d = x.cols();
        let mut means = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &c) in y.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                means[c][j] += x.get(r, j);
            }
        }
        for c in 0..k {
            for j in 0..d {
                means[c][j] /= counts[c].max(1) as f64;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for (r, &c) in y.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (x.get(r, i) - means[c][i]) * (x.get(r, j) - means[c][j]);
                }
            }
        }
        for (i, row) in cov.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v /= (y.len() - k) as f64;
            }
            row[i] += 1e-9;
        }
        let coef: Vec<Vec<f64>> = means.iter().map(|mu| solve(cov.clone(), mu.clone())).collect();
        let offset = means
            .iter()
            .zip(&coef)
            .zip(&counts)
            .map(|((mu, a), &n)| {
                -0.5 * mu.iter().zip(a).map(|(m, v)| m * v).sum::<f64>() + (n as f64 / y.len() as f64).ln()
            })
            .collect();
        Self { coef, offset }
    }

    fn accuracy(&self, x: &Matrix, y: &[usize]) -> f64 {
        let hits = (0..x.rows())
            .filter(|&r| {
                let score = |c: usize| {
                    self.offset[c] + self.coef[c].iter().zip(x.row(r)).map(|(a, v)| a * v).sum::<f64>()
                };
                let best = (0..self.coef.len()).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
                best == y[r]
            })
            .count();
        hits as f64 / y.len() as f64
    }
}

fn spec(n: usize, s: [f64; 2], seed: u64) -> SyntheticSpec {
    spec_with_std(n, s, 1.0, seed)
}

fn spec_with_std(n: usize, s: [f64; 2], std: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 2,
        num_samples: n,
        dims: vec![2, 2],
        separations: s.to_vec(),
        within_std: vec![std, std],
        corruption_fraction: 0.0,
        corruption_scale: 3.0,
        seed,
    }
}

// Means sit at pairwise distance s, so with unit std two classes at s=3 have
// a Bayes accuracy of only 93.3%; these checks use std 0.5.
#[test]
fn separated_modalities_are_linearly_solvable() {
    let ds = data::generate(&spec_with_std(100, [3.0, 3.0], 0.5, 11)).unwrap();
    for m in 0..2 {
        let lda = Lda::fit(ds.modality(m), ds.labels(), 2);
        let acc = lda.accuracy(ds.modality(m), ds.labels());
        assert!(acc > 0.95, "modality {m}: {acc}");
    }
}

#[test]
fn zero_separation_is_chance() {
    // averaged over ten draws so the chance level is pinned down
    let mut chance = Vec::new();
    for seed in 0..10 {
        let ds = data::generate(&spec_with_std(100, [0.0, 3.0], 0.5, seed)).unwrap();
        let (train, test) = ds.split(0.5, seed).unwrap();
        let uninformative = Lda::fit(train.modality(0), train.labels(), 2);
        chance.push(uninformative.accuracy(test.modality(0), test.labels()));
        let informative = Lda::fit(ds.modality(1), ds.labels(), 2);
        assert!(informative.accuracy(ds.modality(1), ds.labels()) > 0.95);
    }
    let mean = stats::mean(&chance);
    assert!((mean - 0.5).abs() < 0.06, "mean held-out accuracy {mean}");
}

#[test]
fn gaussian_noise_adds_its_variance() {
    let ds = data::generate(&spec(10_000, [3.0, 3.0], 3)).unwrap();
    let noisy = data::inject_noise(&ds, &NoiseSpec::gaussian(10.0, vec![0, 1], 4)).unwrap();
    for m in 0..2 {
        for j in 0..2 {
            let before = stats::std_sample(&ds.modality(m).column_vec(j)).powi(2);
            let after = stats::std_sample(&noisy.modality(m).column_vec(j)).powi(2);
            let gain = after - before;
            assert!((gain - 10.0).abs() < 1.0, "modality {m} feature {j}: +{gain}");
        }
    }
}

#[test]
fn oracle_accuracy_degrades_monotonically() {
    let train = data::generate(&spec(10_000, [3.0, 3.0], 21)).unwrap();
    let test = data::generate(&spec(10_000, [3.0, 3.0], 22)).unwrap();
    for m in 0..2 {
        let lda = Lda::fit(train.modality(m), train.labels(), 2);
        let mut last = f64::INFINITY;
        for var in [0.0, 1.0, 5.0, 10.0] {
            let noisy = data::inject_noise(&test, &NoiseSpec::gaussian(var, vec![m], 23)).unwrap();
            let acc = lda.accuracy(noisy.modality(m), noisy.labels());
            assert!(acc <= last + 0.005, "modality {m}: {acc} after {last} at variance {var}");
            last = acc;
        }
    }
}

#[test]
fn noise_on_disjoint_targets_commutes() {
    let ds = data::generate(&spec(500, [3.0, 3.0], 5)).unwrap();
    let a = NoiseSpec::gaussian(2.0, vec![0], 1);
    let mut b = NoiseSpec::gaussian(4.0, vec![1], 2);
    b.fraction = 0.4;
    let ab = data::inject_noise(&data::inject_noise(&ds, &a).unwrap(), &b).unwrap();
    let ba = data::inject_noise(&data::inject_noise(&ds, &b).unwrap(), &a).unwrap();
    assert_eq!(ab.modalities(), ba.modalities());
}
