//! Synthetic multimodal datasets, noise injection and the on-disk format.
//!
//! Each modality is a Gaussian mixture whose class means sit on a regular
//! simplex with pairwise distance `s_m`, so `s_m` alone sets how informative
//! modality `m` is. A corruption fraction `rho` replaces exactly one modality
//! of the selected samples (round-robin over modalities) with label-free
//! noise, which gives per-sample quality variation.
//!
//! Directory layout written by [`save`]:
//!
//! ```text
//! manifest.json     {"version":1,"M":..,"N":..,"K":..,"dims":[..],"seed":..,"provenance":".."}
//! modality_<m>.csv  N rows, d_m columns, 17 significant digits
//! labels.csv        N rows, one class index each
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::io;
use crate::rng::{stream, stream_indexed, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_modalities: usize,
    pub num_samples: usize,
    pub num_classes: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub provenance: String,
}

/// `M` aligned feature matrices plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    modalities: Vec<Matrix>,
    labels: Vec<usize>,
    meta: DatasetMeta,
}

impl MultimodalDataset {
    pub fn new(
        modalities: Vec<Matrix>,
        labels: Vec<usize>,
        num_classes: usize,
        seed: u64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::config("a dataset needs at least one modality"));
        }
        if num_classes < 2 {
            return Err(Error::config(format!("need K >= 2 classes, got {num_classes}")));
        }
        let n = labels.len();
        if let Some((m, x)) = modalities.iter().enumerate().find(|(_, x)| x.rows() != n) {
            return Err(Error::dim(format!(
                "modality {m} has {} rows but there are {n} labels",
                x.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Label {
                label: bad as i64,
                classes: num_classes,
            });
        }
        let meta = DatasetMeta {
            num_modalities: modalities.len(),
            num_samples: n,
            num_classes,
            dims: modalities.iter().map(Matrix::cols).collect(),
            seed,
            provenance: provenance.into(),
        };
        Ok(Self {
            modalities,
            labels,
            meta,
        })
    }

    pub fn modality(&self, m: usize) -> &Matrix {
        &self.modalities[m]
    }

    pub fn modalities(&self) -> &[Matrix] {
        &self.modalities
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn num_modalities(&self) -> usize {
        self.meta.num_modalities
    }

    pub fn len(&self) -> usize {
        self.meta.num_samples
    }

    pub fn is_empty(&self) -> bool {
        self.meta.num_samples == 0
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// Rows picked by index, in order.
    pub fn subset(&self, indices: &[usize], provenance: &str) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::dim(format!("row {bad} of {}", self.len())));
        }
        Self::new(
            self.modalities.iter().map(|x| x.select_rows(indices)).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.meta.num_classes,
            self.meta.seed,
            format!("{}|{provenance}", self.meta.provenance),
        )
    }

    /// Deterministic shuffled split into `(train, eval)`.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::config(format!("train fraction {train_fraction} not in [0,1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream(seed, Purpose::Split));
        let cut = (train_fraction * self.len() as f64).round() as usize;
        let (a, b) = idx.split_at(cut);
        Ok((
            self.subset(a, &format!("split:train:{seed}"))?,
            self.subset(b, &format!("split:eval:{seed}"))?,
        ))
    }
}

fn default_corruption_scale() -> f64 {
    3.0
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_samples: usize,
    /// Feature dimension per modality; its length is `M`.
    pub dims: Vec<usize>,
    /// Pairwise class-mean distance per modality.
    pub separations: Vec<f64>,
    /// Within-class standard deviation per modality.
    pub within_std: Vec<f64>,
    #[serde(default)]
    pub corruption_fraction: f64,
    /// Corrupted rows are drawn from `N(0, (scale * within_std)^2)`.
    #[serde(default = "default_corruption_scale")]
    pub corruption_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn num_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dims.len();
        if m == 0 {
            return Err(Error::config("need at least one modality"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        if self.separations.len() != m || self.within_std.len() != m {
            return Err(Error::config(format!(
                "{m} modalities but {} separations and {} stds",
                self.separations.len(),
                self.within_std.len()
            )));
        }
        for (i, &d) in self.dims.iter().enumerate() {
            if d + 1 < self.num_classes {
                return Err(Error::config(format!(
                    "modality {i}: dim {d} too small for a {}-class simplex",
                    self.num_classes
                )));
            }
        }
        if self.separations.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("separations must be finite and >= 0"));
        }
        if self.within_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("within-class stds must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return Err(Error::config("corruption fraction must lie in [0,1]"));
        }
        if !(self.corruption_scale.is_finite() && self.corruption_scale >= 0.0) {
            return Err(Error::config("corruption scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Class means on a centred regular simplex in the first `K-1` coordinates
/// (Helmert basis), pairwise distance `separation`.
fn simplex_means(k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let scale = separation / std::f64::consts::SQRT_2;
    (0..k)
        .map(|class| {
            let mut mean = vec![0.0; dim];
            for j in 1..k {
                let norm = ((j * (j + 1)) as f64).sqrt();
                let h = if class < j {
                    1.0
                } else if class == j {
                    -(j as f64)
                } else {
                    0.0
                };
                mean[j - 1] = scale * h / norm;
            }
            mean
        })
        .collect()
}

/// Draws a dataset from `spec`. Bit-identical for identical specs.
pub fn generate(spec: &SyntheticSpec) -> Result<MultimodalDataset> {
    generate_with_mask(spec).map(|(ds, _)| ds)
}

/// As [`generate`], also returning `mask[m][i]`: whether row `i` of modality
/// `m` was replaced by noise.
pub fn generate_with_mask(spec: &SyntheticSpec) -> Result<(MultimodalDataset, Vec<Vec<bool>>)> {
    spec.validate()?;
    let (n, k) = (spec.num_samples, spec.num_classes);
    let mut label_rng = stream(spec.seed, Purpose::Labels);
    let labels: Vec<usize> = (0..n).map(|_| label_rng.random_range(0..k)).collect();

    let mut modalities = Vec::with_capacity(spec.dims.len());
    for (m, &d) in spec.dims.iter().enumerate() {
        let means = simplex_means(k, d, spec.separations[m]);
        let std = spec.within_std[m];
        let mut rng = stream_indexed(spec.seed, Purpose::Features, m as u32);
        let mut data = Vec::with_capacity(n * d);
        for &y in &labels {
            for mu in &means[y] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + std * z);
            }
        }
        modalities.push(Matrix::new(n, d, data)?);
    }

    let corrupted = (spec.corruption_fraction * n as f64).round() as usize;
    let mut mask = vec![vec![false; n]; spec.dims.len()];
    if corrupted > 0 {
        let mut rng = stream(spec.seed, Purpose::Corruption);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let m_count = spec.dims.len();
        for (j, &row) in idx[..corrupted].iter().enumerate() {
            let m = j % m_count;
            mask[m][row] = true;
            let sigma = spec.corruption_scale * spec.within_std[m];
            let d = spec.dims[m];
            let x = &mut modalities[m];
            let slot = &mut x.data_mut()[row * d..(row + 1) * d];
            for v in slot {
                let z: f64 = rng.sample(StandardNormal);
                *v = sigma * z;
            }
        }
    }

    let ds = MultimodalDataset::new(
        modalities,
        labels,
        k,
        spec.seed,
        format!(
            "synthetic:K={k},N={n},dims={:?},s={:?},std={:?},rho={},scale={}",
            spec.dims,
            spec.separations,
            spec.within_std,
            spec.corruption_fraction,
            spec.corruption_scale
        ),
    )?;
    Ok((ds, mask))
}

fn default_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    /// Additive `N(0, variance)` per entry.
    Gaussian { variance: f64 },
    /// Each entry becomes the modality min or max with probability `rate`.
    SaltPepper { rate: f64 },
    /// Rows become all-zero.
    Blank,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian { .. } => "gaussian",
            NoiseKind::SaltPepper { .. } => "salt_pepper",
            NoiseKind::Blank => "blank",
        }
    }

    /// Builds a kind from its name and single parameter (ignored for blank).
    pub fn from_name(name: &str, param: f64) -> Result<Self> {
        match name {
            "gaussian" => Ok(NoiseKind::Gaussian { variance: param }),
            "salt_pepper" => Ok(NoiseKind::SaltPepper { rate: param }),
            "blank" => Ok(NoiseKind::Blank),
            other => Err(Error::config(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// A noise injection: what, where and how much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    /// Target modality indices.
    pub modalities: Vec<usize>,
    /// Fraction of samples touched.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(variance: f64, modalities: Vec<usize>, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian { variance },
            modalities,
            fraction: 1.0,
            seed,
        }
    }

    /// The single numeric knob of this noise, as reported in metrics tables.
    pub fn param(&self) -> f64 {
        match self.kind {
            NoiseKind::Gaussian { variance } => variance,
            NoiseKind::SaltPepper { rate } => rate,
            NoiseKind::Blank => self.fraction,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn validate(&self, num_modalities: usize) -> Result<()> {
        if let Some(&bad) = self.modalities.iter().find(|&&m| m >= num_modalities) {
            return Err(Error::config(format!(
                "noise targets modality {bad} of {num_modalities}"
            )));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::config("noise fraction must lie in [0,1]"));
        }
        match self.kind {
            NoiseKind::Gaussian { variance } if !(variance.is_finite() && variance >= 0.0) => {
                Err(Error::config("gaussian variance must be finite and >= 0"))
            }
            NoiseKind::SaltPepper { rate } if !(0.0..=1.0).contains(&rate) => {
                Err(Error::config("salt-pepper rate must lie in [0,1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Returns a corrupted copy of `ds`; the input is left untouched.
pub fn inject_noise(ds: &MultimodalDataset, noise: &NoiseSpec) -> Result<MultimodalDataset> {
    noise.validate(ds.num_modalities())?;
    let n = ds.len();
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut stream(noise.seed, Purpose::Noise));
    rows.truncate((noise.fraction * n as f64).round() as usize);
    rows.sort_unstable();

    let mut out = ds.clone();
    let mut targets = noise.modalities.clone();
    targets.sort_unstable();
    targets.dedup();
    for &m in &targets {
        let x = &mut out.modalities[m];
        let d = x.cols();
        let mut rng = stream_indexed(noise.seed, Purpose::Noise, 1 + m as u32);
        match noise.kind {
            NoiseKind::Gaussian { variance } => {
                if variance == 0.0 {
                    continue;
                }
                let sigma = variance.sqrt();
                let data = x.data_mut();
                for &r in &rows {
                    for v in &mut data[r * d..(r + 1) * d] {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += sigma * z;
                    }
                }
            }
            NoiseKind::SaltPepper { rate } => {
                let src = ds.modality(m).as_slice();
                let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let data = x.data_mut();
                for &r in &rows {
                    for v in &mut data[r * d..(r + 1) * d] {
                        let hit = rng.random::<f64>() < rate;
                        let salt = rng.random::<bool>();
                        if hit {
                            *v = if salt { hi } else { lo };
                        }
                    }
                }
            }
            NoiseKind::Blank => {
                let data = x.data_mut();
                for &r in &rows {
                    data[r * d..(r + 1) * d].fill(0.0);
                }
            }
        }
    }
    out.meta.provenance = format!(
        "{}+noise:{}:{}:frac={}:m={:?}:seed={}",
        ds.meta.provenance,
        noise.kind.name(),
        noise.param(),
        noise.fraction,
        targets,
        noise.seed
    );
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    dims: Vec<usize>,
    seed: u64,
    provenance: String,
}

pub fn save(ds: &MultimodalDataset, dir: &Path) -> Result<()> {
    let manifest = Manifest {
        version: 1,
        m: ds.meta.num_modalities,
        n: ds.meta.num_samples,
        k: ds.meta.num_classes,
        dims: ds.meta.dims.clone(),
        seed: ds.meta.seed,
        provenance: ds.meta.provenance.clone(),
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    for (m, x) in ds.modalities.iter().enumerate() {
        io::write_matrix_csv(&dir.join(format!("modality_{m}.csv")), x, None)?;
    }
    let mut labels = String::with_capacity(ds.len() * 3);
    for y in &ds.labels {
        labels.push_str(&y.to_string());
        labels.push('\n');
    }
    io::write_text(&dir.join("labels.csv"), &labels)
}

pub fn load(dir: &Path) -> Result<MultimodalDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = io::read_text(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != 1 {
        return Err(Error::format(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.dims.len() != manifest.m {
        return Err(Error::format(format!(
            "manifest lists {} dims for M={}",
            manifest.dims.len(),
            manifest.m
        )));
    }
    let mut modalities = Vec::with_capacity(manifest.m);
    for (m, &d) in manifest.dims.iter().enumerate() {
        let path = dir.join(format!("modality_{m}.csv"));
        let x = io::read_matrix_csv(&path, false, Some(d))?;
        if x.rows() != manifest.n {
            return Err(Error::format(format!(
                "{}: {} rows, manifest says N={}",
                path.display(),
                x.rows(),
                manifest.n
            )));
        }
        modalities.push(x);
    }
    let labels_path = dir.join("labels.csv");
    let labels = io::read_text(&labels_path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::format(format!("{}: bad label {l:?}", labels_path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != manifest.n {
        return Err(Error::format(format!(
            "{}: {} labels, manifest says N={}",
            labels_path.display(),
            labels.len(),
            manifest.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= manifest.k) {
        return Err(Error::format(format!("label {bad} out of range for K={}", manifest.k)));
    }
    MultimodalDataset::new(modalities, labels, manifest.k, manifest.seed, manifest.provenance)
        .map_err(|e| Error::format(e.to_string()))
}
