//! Decision-level late fusion with static or uncertainty-aware weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{argmax_rows, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::{io, stats};

/// Row sums at or below this fall back to uniform weights when normalizing.
pub const NORMALIZE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightMode {
    Static { weights: Vec<f64> },
    /// `w^m = alpha^m u^m + beta^m`.
    Dynamic { alpha: Vec<f64>, beta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPolicy {
    #[serde(flatten)]
    pub mode: WeightMode,
    #[serde(default)]
    pub normalize: bool,
    /// Clip negative weights to zero before any normalization.
    #[serde(default)]
    pub clamp: bool,
}

impl WeightPolicy {
    pub fn uniform(m: usize) -> Self {
        Self::fixed(vec![1.0 / m as f64; m])
    }

    pub fn fixed(weights: Vec<f64>) -> Self {
        Self {
            mode: WeightMode::Static { weights },
            normalize: false,
            clamp: false,
        }
    }

    pub fn dynamic(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        Self {
            mode: WeightMode::Dynamic { alpha, beta },
            normalize: false,
            clamp: false,
        }
    }

    pub fn num_modalities(&self) -> usize {
        match &self.mode {
            WeightMode::Static { weights } => weights.len(),
            WeightMode::Dynamic { alpha, .. } => alpha.len(),
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self.mode, WeightMode::Static { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            WeightMode::Static { weights } => {
                if weights.is_empty() {
                    return Err(Error::config("static policy needs at least one weight"));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::config("static weights must be finite and >= 0"));
                }
            }
            WeightMode::Dynamic { alpha, beta } => {
                if alpha.is_empty() || alpha.len() != beta.len() {
                    return Err(Error::config(format!(
                        "dynamic policy has {} alphas and {} betas",
                        alpha.len(),
                        beta.len()
                    )));
                }
                if alpha.iter().any(|a| !(a.is_finite() && *a < 0.0)) {
                    return Err(Error::config("dynamic alpha must be finite and < 0"));
                }
                if beta.iter().any(|b| !b.is_finite()) {
                    return Err(Error::config("dynamic beta must be finite"));
                }
            }
        }
        Ok(())
    }
}

/// Per-sample weights, `N x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub weights: Matrix,
    pub policy: WeightPolicy,
}

impl FusionWeights {
    pub fn column(&self, m: usize) -> Vec<f64> {
        self.weights.column_vec(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub logits: Matrix,
    pub labels: Vec<usize>,
}

/// Evaluates the policy on `n` samples. `scores[m]` holds `u^m`; static
/// policies ignore it and may pass an empty slice.
pub fn compute_weights(policy: &WeightPolicy, n: usize, scores: &[&[f64]]) -> Result<FusionWeights> {
    policy.validate()?;
    let m = policy.num_modalities();
    let mut data = vec![0.0; n * m];
    match &policy.mode {
        WeightMode::Static { weights } => {
            for r in 0..n {
                data[r * m..(r + 1) * m].copy_from_slice(weights);
            }
        }
        WeightMode::Dynamic { alpha, beta } => {
            if scores.len() != m {
                return Err(Error::config(format!(
                    "dynamic policy over {m} modalities got {} score vectors",
                    scores.len()
                )));
            }
            for (j, u) in scores.iter().enumerate() {
                if u.len() != n {
                    return Err(Error::dim(format!(
                        "modality {j}: {} scores for {n} samples",
                        u.len()
                    )));
                }
                for (r, &v) in u.iter().enumerate() {
                    data[r * m + j] = alpha[j] * v + beta[j];
                }
            }
        }
    }
    if policy.clamp {
        for w in &mut data {
            *w = w.max(0.0);
        }
    }
    if policy.normalize {
        for row in data.chunks_mut(m) {
            let s: f64 = row.iter().sum();
            if s <= NORMALIZE_FLOOR {
                row.fill(1.0 / m as f64);
            } else {
                let inv = 1.0 / s;
                row.iter_mut().for_each(|w| *w *= inv);
            }
        }
    }
    Ok(FusionWeights {
        weights: Matrix::new(n, m, data)?,
        policy: policy.clone(),
    })
}

/// Tape form of [`compute_weights`]: one `N x 1` column per modality.
pub fn weights_on_tape(
    tape: &mut Tape,
    policy: &WeightPolicy,
    n: usize,
    scores: &[Var],
) -> Result<Vec<Var>> {
    policy.validate()?;
    let m = policy.num_modalities();
    let mut cols = match &policy.mode {
        WeightMode::Static { weights } => weights
            .iter()
            .map(|&w| Matrix::filled(n, 1, w).map(|c| tape.constant(c)))
            .collect::<Result<Vec<_>>>()?,
        WeightMode::Dynamic { alpha, beta } => {
            if scores.len() != m {
                return Err(Error::config(format!(
                    "dynamic policy over {m} modalities got {} score columns",
                    scores.len()
                )));
            }
            let mut out = Vec::with_capacity(m);
            for (j, &u) in scores.iter().enumerate() {
                if tape.value(u).shape() != (n, 1) {
                    return Err(Error::dim(format!(
                        "modality {j}: score column {:?}, expected ({n}, 1)",
                        tape.value(u).shape()
                    )));
                }
                let w = tape.scale(u, alpha[j]);
                out.push(tape.shift(w, beta[j]));
            }
            out
        }
    };
    if policy.clamp {
        for c in &mut cols {
            *c = tape.relu(*c);
        }
    }
    if policy.normalize && m > 0 {
        let mut total = cols[0];
        for &c in &cols[1..] {
            total = tape.add(total, c)?;
        }
        // rows at or below the floor fall back to uniform weights
        let mut keep = vec![1.0; n];
        let mut offset = vec![0.0; n];
        for r in 0..n {
            if tape.value(total).get(r, 0) <= NORMALIZE_FLOOR {
                keep[r] = 0.0;
                offset[r] = 1.0 / m as f64;
            }
        }
        let fill: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let keep = tape.constant(Matrix::column(keep)?);
        let fill = tape.constant(Matrix::column(fill)?);
        let offset = tape.constant(Matrix::column(offset)?);
        let kept = tape.mul_col(keep, total)?;
        let safe = tape.add(kept, fill)?;
        let inv = tape.recip(safe)?;
        let inv = tape.mul_col(keep, inv)?;
        for c in &mut cols {
            let scaled = tape.mul_col(inv, *c)?;
            *c = tape.add(scaled, offset)?;
        }
    }
    Ok(cols)
}

/// Default slope `-c / (std(u) + 1e-8)`.
pub fn default_alpha(u: &[f64], c: f64) -> f64 {
    -c / (stats::std_population(u) + 1e-8)
}

/// `beta^m = w_target^m - alpha^m mean(u^m)`, so the sample-mean weight hits the target.
pub fn calibrate(u_samples: &[&[f64]], w_target: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    if u_samples.len() != w_target.len() || u_samples.len() != alpha.len() {
        return Err(Error::config(format!(
            "calibration over {} modalities got {} targets and {} slopes",
            u_samples.len(),
            w_target.len(),
            alpha.len()
        )));
    }
    u_samples
        .iter()
        .zip(w_target)
        .zip(alpha)
        .map(|((u, &t), &a)| {
            if !(a < 0.0 && a.is_finite()) {
                return Err(Error::config(format!("alpha must be < 0, got {a}")));
            }
            if u.is_empty() {
                return Err(Error::DegenerateInput("calibration on zero samples".into()));
            }
            Ok(t - a * stats::mean(u))
        })
        .collect()
}

/// Calibrated dynamic policy using [`default_alpha`] with slope constant `c`.
pub fn calibrated_policy(u_samples: &[&[f64]], w_target: &[f64], c: f64) -> Result<WeightPolicy> {
    let alpha: Vec<f64> = u_samples.iter().map(|u| default_alpha(u, c)).collect();
    let beta = calibrate(u_samples, w_target, &alpha)?;
    Ok(WeightPolicy::dynamic(alpha, beta))
}

/// `f(x) = sum_m w^m(x) f^m(x)` with argmax labels.
pub fn fuse(weights: &FusionWeights, logits: &[Matrix]) -> Result<FusedPrediction> {
    let (n, m) = weights.weights.shape();
    if logits.len() != m {
        return Err(Error::dim(format!("{} logit matrices for {m} weight columns", logits.len())));
    }
    let k = logits.first().map(Matrix::cols).unwrap_or(0);
    for (j, z) in logits.iter().enumerate() {
        if z.shape() != (n, k) {
            return Err(Error::dim(format!(
                "modality {j} logits {:?}, expected ({n}, {k})",
                z.shape()
            )));
        }
    }
    let mut data = vec![0.0; n * k];
    for r in 0..n {
        let w = weights.weights.row(r);
        let out = &mut data[r * k..(r + 1) * k];
        for (j, z) in logits.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(z.row(r)) {
                *o += w[j] * v;
            }
        }
    }
    let fused = Matrix::new(n, k, data)?;
    Ok(FusedPrediction {
        labels: argmax_rows(&fused),
        logits: fused,
    })
}

/// Tape form of [`fuse`] over weight columns and logit vars.
pub fn fuse_on_tape(tape: &mut Tape, weights: &[Var], logits: &[Var]) -> Result<Var> {
    if weights.len() != logits.len() || weights.is_empty() {
        return Err(Error::dim(format!(
            "{} weight columns for {} logit matrices",
            weights.len(),
            logits.len()
        )));
    }
    let mut acc = tape.mul_col(weights[0], logits[0])?;
    for (&w, &z) in weights.iter().zip(logits).skip(1) {
        let term = tape.mul_col(w, z)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

pub fn weights_csv(weights: &FusionWeights) -> String {
    let header: Vec<String> = (0..weights.weights.cols()).map(|m| format!("w_{m}")).collect();
    io::matrix_to_csv(&weights.weights, Some(&header))
}

pub fn write_weights_csv(path: &Path, weights: &FusionWeights) -> Result<()> {
    io::write_text(path, &weights_csv(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn compute_weights_examples() {
        let w = compute_weights(&WeightPolicy::fixed(vec![0.5, 0.5]), 3, &[]).unwrap();
        assert_eq!(w.weights, Matrix::filled(3, 2, 0.5).unwrap());

        let p = WeightPolicy::dynamic(vec![-1.0], vec![2.0]);
        let w = compute_weights(&p, 1, &[&[0.5]]).unwrap();
        assert_eq!(w.weights.get(0, 0), 1.5);

        let mut p = WeightPolicy::dynamic(vec![-1.0, -1.0], vec![1.0, 1.0]);
        p.normalize = true;
        let w = compute_weights(&p, 1, &[&[0.2], &[0.8]]).unwrap();
        assert_abs_diff_eq!(w.weights.get(0, 0), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(w.weights.get(0, 1), 0.2, epsilon = 1e-15);

        assert!(matches!(compute_weights(&p, 1, &[&[0.2]]), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_falls_back_to_uniform() {
        let mut p = WeightPolicy::dynamic(vec![-1.0, -1.0], vec![0.0, 0.0]);
        p.clamp = true;
        p.normalize = true;
        let w = compute_weights(&p, 2, &[&[1.0, -0.5], &[2.0, -0.5]]).unwrap();
        assert_eq!(w.weights.row(0), &[0.5, 0.5]);
        assert_eq!(w.weights.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn invalid_policies() {
        assert!(compute_weights(&WeightPolicy::dynamic(vec![0.0], vec![1.0]), 1, &[&[0.0]]).is_err());
        assert!(compute_weights(&WeightPolicy::fixed(vec![-0.1]), 1, &[]).is_err());
    }

    #[test]
    fn calibrate_examples() {
        let u = [1.0, 3.0];
        assert_eq!(calibrate(&[&u], &[1.0], &[-0.5]).unwrap(), vec![2.0]);
        assert_eq!(calibrate(&[&[-1.0, 1.0]], &[0.5], &[-7.0]).unwrap(), vec![0.5]);
        assert!(matches!(calibrate(&[&u], &[1.0], &[0.0]), Err(Error::Config(_))));
        assert!(matches!(calibrate(&[&u], &[1.0], &[0.3]), Err(Error::Config(_))));
    }

    #[test]
    fn calibrate_random_sample_hits_target() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let u: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..5.0)).collect();
        let beta = calibrate(&[&u], &[0.5], &[-0.3]).unwrap();
        let p = WeightPolicy::dynamic(vec![-0.3], beta);
        let w = compute_weights(&p, u.len(), &[&u]).unwrap();
        assert!((stats::mean(&w.column(0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fuse_examples() {
        let w = compute_weights(&WeightPolicy::fixed(vec![0.5, 0.5]), 1, &[]).unwrap();
        let f = fuse(&w, &[m(&[vec![2.0, 0.0]]), m(&[vec![0.0, 2.0]])]).unwrap();
        assert_eq!(f.logits.as_slice(), &[1.0, 1.0]);
        assert_eq!(f.labels, vec![0]);

        let f1 = m(&[vec![0.3, -2.5, 7.0]]);
        let w = compute_weights(&WeightPolicy::fixed(vec![1.0, 0.0]), 1, &[]).unwrap();
        let f = fuse(&w, &[f1.clone(), m(&[vec![9.0, 9.0, 9.0]])]).unwrap();
        assert_eq!(f.logits, f1);

        let w = compute_weights(&WeightPolicy::fixed(vec![0.8, 0.2]), 1, &[]).unwrap();
        let f = fuse(&w, &[m(&[vec![1.0, -1.0]]), m(&[vec![-3.0, 3.0]])]).unwrap();
        assert_abs_diff_eq!(f.logits.get(0, 0), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(f.logits.get(0, 1), -0.2, epsilon = 1e-15);
        assert_eq!(f.labels, vec![0]);

        assert!(matches!(fuse(&w, &[m(&[vec![1.0, -1.0]])]), Err(Error::Dimension(_))));
    }

    #[test]
    fn tape_weights_match_off_tape() {
        let u0 = vec![0.1, -2.0, 0.7, 1.5];
        let u1 = vec![0.4, 0.4, -1.0, 2.5];
        for (normalize, clamp) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut p = WeightPolicy::dynamic(vec![-0.7, -1.3], vec![0.5, 0.2]);
            p.normalize = normalize;
            p.clamp = clamp;
            let off = compute_weights(&p, 4, &[&u0, &u1]).unwrap();
            let mut t = Tape::new();
            let a = t.leaf(Matrix::column(u0.clone()).unwrap());
            let b = t.leaf(Matrix::column(u1.clone()).unwrap());
            let cols = weights_on_tape(&mut t, &p, 4, &[a, b]).unwrap();
            for (j, c) in cols.iter().enumerate() {
                for r in 0..4 {
                    assert_abs_diff_eq!(t.value(*c).get(r, 0), off.weights.get(r, j), epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn static_is_constant_dynamic_bit_exactly() {
        let p = WeightPolicy::uniform(3);
        let w = compute_weights(&p, 5, &[]).unwrap();
        assert!(w.weights.as_slice().iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn weights_csv_header() {
        let w = compute_weights(&WeightPolicy::fixed(vec![0.25, 0.75]), 1, &[]).unwrap();
        let csv = weights_csv(&w);
        assert!(csv.starts_with("w_0,w_1\n"));
        let back = io::parse_matrix_csv(&csv, true, Some(2), "w").unwrap();
        assert_eq!(back, w.weights);
    }

    fn sample(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(0.0..5.0f64, n),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sign_flip((u, l) in sample(40), alpha in -10.0..-0.01f64, target in 0.0..2.0f64) {
            prop_assume!(!stats::is_constant(&u) && !stats::is_constant(&l));
            let beta = calibrate(&[&u], &[target], &[alpha]).unwrap();
            let w = compute_weights(&WeightPolicy::dynamic(vec![alpha], beta), u.len(), &[&u]).unwrap();
            let w = w.column(0);
            prop_assert!((stats::mean(&w) - target).abs() < 1e-12);
            let ru = stats::pearson(&u, &l).unwrap();
            let rw = stats::pearson(&w, &l).unwrap();
            prop_assert!((rw + ru).abs() < 1e-12);
        }

        #[test]
        fn fuse_is_linear_in_weights(
            w1 in prop::collection::vec(-2.0..2.0f64, 6),
            w2 in prop::collection::vec(-2.0..2.0f64, 6),
            z in prop::collection::vec(-5.0..5.0f64, 18),
        ) {
            let mk = |w: &[f64]| FusionWeights {
                weights: Matrix::new(3, 2, w.to_vec()).unwrap(),
                policy: WeightPolicy::uniform(2),
            };
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let f = [Matrix::new(3, 3, z[..9].to_vec()).unwrap(), Matrix::new(3, 3, z[9..].to_vec()).unwrap()];
            let a = fuse(&mk(&w1), &f).unwrap().logits;
            let b = fuse(&mk(&w2), &f).unwrap().logits;
            let c = fuse(&mk(&sum), &f).unwrap().logits;
            for i in 0..9 {
                prop_assert!((c.as_slice()[i] - a.as_slice()[i] - b.as_slice()[i]).abs() < 1e-12);
            }
        }
    }
}
