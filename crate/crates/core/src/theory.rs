//! Two-class bench for the generalization-bound decomposition.
//!
//! Labels are `y in {-1, +1}`, each modality has a linear scorer
//! `f^m(x) = <v, x>` with `||v|| <= B_m`, and the loss is the natural
//! logistic loss `ln(1 + exp(-y f))`. When an uncertainty estimator needs
//! logits, a score `f` is presented as the pair `(-f/2, f/2)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalDataset;
use crate::diffcore::{softplus, Matrix};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::fusion::{self, FusionWeights, WeightPolicy};
use crate::optim::project_l2_ball;
use crate::rng::{stream_indexed, Purpose};
use crate::stats;
use crate::uncertainty::EstimatorKind;

/// `ln(1 + exp(-y * score))` without overflow.
pub fn logistic_loss(score: f64, y: f64) -> Result<f64> {
    if y != 1.0 && y != -1.0 {
        return Err(Error::Label {
            label: y as i64,
            classes: 2,
        });
    }
    Ok(softplus(-y * score))
}

/// Maps class 0 to `-1` and class 1 to `+1`.
pub fn sign_labels(labels: &[usize]) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|&l| match l {
            0 => Ok(-1.0),
            1 => Ok(1.0),
            _ => Err(Error::Label {
                label: l as i64,
                classes: 2,
            }),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Monte-Carlo `(B/N) E_sigma || sum_i sigma_i x_i ||`, the empirical
/// Rademacher complexity of the radius-`B` L2 ball of linear scorers.
/// Draw `d` uses its own stream, so results do not depend on scheduling.
pub fn rademacher_linear(
    x: &Matrix,
    bound: f64,
    draws: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<RademacherEstimate> {
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::config(format!("norm bound must be > 0, got {bound}")));
    }
    if draws == 0 {
        return Err(Error::config("need at least one Rademacher draw"));
    }
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::DegenerateInput("Rademacher estimate on zero samples".into()));
    }
    let values = map_indexed(draws, mode, |k| {
        let mut rng = stream_indexed(seed, Purpose::Rademacher, k as u32);
        let mut acc = vec![0.0; d];
        for i in 0..n {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for (a, &v) in acc.iter_mut().zip(x.row(i)) {
                *a += s * v;
            }
        }
        bound * acc.iter().map(|v| v * v).sum::<f64>().sqrt() / n as f64
    });
    Ok(RademacherEstimate {
        mean: stats::mean(&values),
        std_error: stats::std_sample(&values) / (draws as f64).sqrt(),
        draws,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub v: Vec<f64>,
    pub bound: f64,
}

impl LinearScorer {
    /// Projected full-batch gradient descent on the mean logistic loss,
    /// starting from zero.
    pub fn fit(x: &Matrix, y: &[f64], bound: f64, steps: usize, lr: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::config(format!("norm bound must be > 0, got {bound}")));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("learning rate must be > 0"));
        }
        let (n, d) = x.shape();
        if y.len() != n || n == 0 {
            return Err(Error::dim(format!("{} labels for {n} rows", y.len())));
        }
        let mut v = Matrix::zeros(1, d);
        for _ in 0..steps {
            let mut g = vec![0.0; d];
            for (i, &yi) in y.iter().enumerate() {
                let row = x.row(i);
                let f: f64 = row.iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
                // d/df ln(1 + e^{-y f}) = -y sigmoid(-y f)
                let c = -yi * crate::diffcore::sigmoid(-yi * f) / n as f64;
                for (gj, &xj) in g.iter_mut().zip(row) {
                    *gj += c * xj;
                }
            }
            let next: Vec<f64> = v.as_slice().iter().zip(&g).map(|(a, b)| a - lr * b).collect();
            v = Matrix::new(1, d, next)?;
            project_l2_ball(&mut v, bound);
        }
        Ok(Self {
            v: v.into_vec(),
            bound,
        })
    }

    pub fn scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.v.len() {
            return Err(Error::dim(format!(
                "scorer has {} weights, input has {} columns",
                self.v.len(),
                x.cols()
            )));
        }
        Ok((0..x.rows())
            .map(|i| x.row(i).iter().zip(&self.v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Two-class logits `(-f/2, f/2)` for a score vector.
pub fn score_logits(scores: &[f64]) -> Matrix {
    let data = scores.iter().flat_map(|&f| [-0.5 * f, 0.5 * f]).collect();
    Matrix::new(scores.len(), 2, data).expect("finite scores")
}

/// Linear scorers with a weight policy over their uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoClassFusion {
    pub scorers: Vec<LinearScorer>,
    pub policy: WeightPolicy,
    pub estimator: EstimatorKind,
    pub temperature: f64,
}

impl TwoClassFusion {
    pub fn scores(&self, ds: &MultimodalDataset) -> Result<Vec<Vec<f64>>> {
        if ds.num_modalities() != self.scorers.len() {
            return Err(Error::dim(format!(
                "{} scorers for {} modalities",
                self.scorers.len(),
                ds.num_modalities()
            )));
        }
        self.scorers
            .iter()
            .zip(ds.modalities())
            .map(|(s, x)| s.scores(x))
            .collect()
    }

    pub fn uncertainty(&self, scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        scores
            .iter()
            .enumerate()
            .map(|(m, f)| {
                self.estimator
                    .score(&score_logits(f), self.temperature, m)
                    .map(|s| s.values)
            })
            .collect()
    }

    pub fn weights_from_scores(&self, scores: &[Vec<f64>]) -> Result<FusionWeights> {
        let n = scores.first().map(Vec::len).unwrap_or(0);
        if self.policy.is_static() {
            return fusion::compute_weights(&self.policy, n, &[]);
        }
        let u = self.uncertainty(scores)?;
        let refs: Vec<&[f64]> = u.iter().map(Vec::as_slice).collect();
        fusion::compute_weights(&self.policy, n, &refs)
    }

    /// Re-fits `beta` so the mean weight on `ds` equals `w_target`, using slope constant `c`.
    pub fn calibrate_on(&mut self, ds: &MultimodalDataset, w_target: &[f64], c: f64) -> Result<()> {
        let u = self.uncertainty(&self.scores(ds)?)?;
        let refs: Vec<&[f64]> = u.iter().map(Vec::as_slice).collect();
        let mut p = fusion::calibrated_policy(&refs, w_target, c)?;
        p.normalize = self.policy.normalize;
        p.clamp = self.policy.clamp;
        self.policy = p;
        Ok(())
    }
}

/// Per-sample fused scores `sum_m w^m f^m`.
pub fn fused_scores(weights: &FusionWeights, scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (n, m) = weights.weights.shape();
    if scores.len() != m || scores.iter().any(|s| s.len() != n) {
        return Err(Error::dim("score vectors do not match the weight matrix"));
    }
    Ok((0..n)
        .map(|i| {
            let w = weights.weights.row(i);
            (0..m).map(|j| w[j] * scores[j][i]).sum()
        })
        .collect())
}

pub fn per_sample_logistic(scores: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != y.len() {
        return Err(Error::dim(format!("{} scores for {} labels", scores.len(), y.len())));
    }
    scores.iter().zip(y).map(|(&f, &yi)| logistic_loss(f, yi)).collect()
}

/// `M sqrt(ln(1/delta) / (2N))`.
pub fn confidence_term(m: usize, n: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("delta must lie in (0,1), got {delta}")));
    }
    if n == 0 {
        return Err(Error::config("confidence term needs N >= 1"));
    }
    Ok(m as f64 * ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityTerms {
    pub modality: usize,
    pub mean_weight: f64,
    pub empirical_loss: f64,
    pub rademacher: f64,
    pub rademacher_std_error: f64,
    pub covariance: f64,
    pub term_l: f64,
    pub term_c: f64,
    pub term_cov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub per_modality: Vec<ModalityTerms>,
    pub term_l: f64,
    pub term_c: f64,
    pub term_cov: f64,
    pub confidence_term: f64,
    pub total_bound: f64,
    pub measured_gerror: f64,
    pub delta: f64,
    pub n: usize,
    pub m: usize,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.measured_gerror <= self.total_bound
    }

    /// Recomputes the total from its parts.
    pub fn reconciled_total(&self) -> f64 {
        self.term_l + self.term_c + self.term_cov + self.confidence_term
    }
}

/// Assembles the report from training-set weights and losses, per-modality
/// complexity estimates and a measured generalization error.
pub fn assemble_bound(
    train_weights: &FusionWeights,
    train_losses: &[Vec<f64>],
    rademacher: &[RademacherEstimate],
    measured_gerror: f64,
    delta: f64,
) -> Result<BoundReport> {
    let (n, m) = train_weights.weights.shape();
    if train_losses.len() != m || rademacher.len() != m {
        return Err(Error::dim(format!(
            "{m} weight columns, {} loss vectors, {} complexity terms",
            train_losses.len(),
            rademacher.len()
        )));
    }
    let conf = confidence_term(m, n, delta)?;
    let mut per_modality = Vec::with_capacity(m);
    for j in 0..m {
        let w = train_weights.column(j);
        let l = &train_losses[j];
        if l.len() != n {
            return Err(Error::dim(format!("modality {j}: {} losses for {n} rows", l.len())));
        }
        let mean_weight = stats::mean(&w);
        let empirical_loss = stats::mean(l);
        let covariance = stats::covariance(&w, l)?;
        per_modality.push(ModalityTerms {
            modality: j,
            mean_weight,
            empirical_loss,
            rademacher: rademacher[j].mean,
            rademacher_std_error: rademacher[j].std_error,
            covariance,
            term_l: mean_weight * empirical_loss,
            term_c: mean_weight * rademacher[j].mean,
            term_cov: covariance,
        });
    }
    let term_l = per_modality.iter().map(|t| t.term_l).sum::<f64>();
    let term_c = per_modality.iter().map(|t| t.term_c).sum::<f64>();
    let term_cov = per_modality.iter().map(|t| t.term_cov).sum::<f64>();
    Ok(BoundReport {
        per_modality,
        term_l,
        term_c,
        term_cov,
        confidence_term: conf,
        total_bound: term_l + term_c + term_cov + conf,
        measured_gerror,
        delta,
        n,
        m,
    })
}

/// Full bound report: terms on `train`, generalization error on `eval`.
pub fn bound_report(
    fusion_model: &TwoClassFusion,
    train: &MultimodalDataset,
    eval: &MultimodalDataset,
    delta: f64,
    rademacher_draws: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<BoundReport> {
    confidence_term(train.num_modalities(), train.len(), delta)?;
    let y = sign_labels(train.labels())?;
    let scores = fusion_model.scores(train)?;
    let weights = fusion_model.weights_from_scores(&scores)?;
    let losses = scores
        .iter()
        .map(|f| per_sample_logistic(f, &y))
        .collect::<Result<Vec<_>>>()?;
    let rad = fusion_model
        .scorers
        .iter()
        .zip(train.modalities())
        .enumerate()
        .map(|(j, (s, x))| {
            rademacher_linear(x, s.bound, rademacher_draws, crate::rng::mix_seed(seed, j as u64), mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let gerror = measured_gerror(fusion_model, eval)?;
    assemble_bound(&weights, &losses, &rad, gerror, delta)
}

/// Mean fused logistic loss on `ds`.
pub fn measured_gerror(fusion_model: &TwoClassFusion, ds: &MultimodalDataset) -> Result<f64> {
    let y = sign_labels(ds.labels())?;
    let scores = fusion_model.scores(ds)?;
    let weights = fusion_model.weights_from_scores(&scores)?;
    let fused = fused_scores(&weights, &scores)?;
    Ok(stats::mean(&per_sample_logistic(&fused, &y)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityCondition {
    pub modality: usize,
    pub mean_weight_gap: f64,
    /// `None` when the weights are constant and the correlation is undefined.
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub per_modality: Vec<ModalityCondition>,
    pub tolerance: f64,
    pub conditions_met: bool,
}

/// Checks `mean(w^m) == w_static^m` and `r(w^m, l^m) <= 0` per modality.
/// Constant weights count as satisfying the correlation condition.
pub fn condition_check(
    weights: &FusionWeights,
    losses: &[Vec<f64>],
    w_static: &[f64],
    tolerance: f64,
) -> Result<ConditionCheck> {
    let (n, m) = weights.weights.shape();
    if losses.len() != m || w_static.len() != m {
        return Err(Error::dim(format!(
            "{m} weight columns, {} loss vectors, {} static weights",
            losses.len(),
            w_static.len()
        )));
    }
    let mut per_modality = Vec::with_capacity(m);
    let mut ok = true;
    for j in 0..m {
        let w = weights.column(j);
        let l = &losses[j];
        if l.len() != n {
            return Err(Error::dim(format!("modality {j}: {} losses for {n} rows", l.len())));
        }
        if stats::is_constant(l) {
            return Err(Error::DegenerateInput(format!("modality {j}: constant loss vector")));
        }
        let gap = (stats::mean(&w) - w_static[j]).abs();
        let pearson = if stats::is_constant(&w) {
            None
        } else {
            Some(stats::pearson(&w, l)?)
        };
        ok &= gap < tolerance && pearson.is_none_or(|r| r <= tolerance);
        per_modality.push(ModalityCondition {
            modality: j,
            mean_weight_gap: gap,
            pearson,
        });
    }
    Ok(ConditionCheck {
        per_modality,
        tolerance,
        conditions_met: ok,
    })
}

const CONVEX_TOL: f64 = 1e-9;

/// Max over samples of `l(sum_m w^m f^m, y) - sum_m w^m l(f^m, y)`.
/// Requires every weight row to be a convex combination.
pub fn convexity_split_check(weights: &FusionWeights, scores: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let (n, m) = weights.weights.shape();
    if scores.len() != m || y.len() != n {
        return Err(Error::dim("scores and labels do not match the weight matrix"));
    }
    for i in 0..n {
        let row = weights.weights.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&w| w < 0.0) || (s - 1.0).abs() > CONVEX_TOL {
            return Err(Error::config(format!(
                "row {i} is not a convex combination (sum {s}); the split is not guaranteed"
            )));
        }
    }
    let fused = fused_scores(weights, scores)?;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let row = weights.weights.row(i);
        let mut split = 0.0;
        for j in 0..m {
            split += row[j] * logistic_loss(scores[j][i], y[i])?;
        }
        worst = worst.max(logistic_loss(fused[i], y[i])? - split);
    }
    Ok(worst)
}
