//! Per-sample uncertainty estimators `u^m(x)` computed from unimodal logits.
//!
//! Every estimator comes in two forms: an off-tape function returning an
//! [`UncertaintyScore`], and a tape form returning an `N x 1` [`Var`] so the
//! fusion weights can be differentiated during training. Both produce the
//! same numbers.

use serde::{Deserialize, Serialize};

use crate::diffcore::{argmax_rows, lse_and_softmax, softplus, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// `-T logsumexp(z / T)`.
    Energy,
    /// `1 - max softmax(z)`.
    Confidence,
    /// `K / S` for a Dirichlet with `alpha_k = softplus(z_k) + 1`.
    Dst,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [Self::Energy, Self::Confidence, Self::Dst];

    pub fn name(self) -> &'static str {
        match self {
            Self::Energy => "energy",
            Self::Confidence => "confidence",
            Self::Dst => "dst",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::config(format!("unknown uncertainty estimator {name:?}")))
    }

    /// Off-tape scores for one modality.
    pub fn score(self, logits: &Matrix, temperature: f64, modality: usize) -> Result<UncertaintyScore> {
        let mut s = match self {
            Self::Energy => energy_score(logits, temperature)?,
            Self::Confidence => confidence_uncertainty(logits)?,
            Self::Dst => dst_uncertainty(logits)?,
        };
        s.modality = modality;
        Ok(s)
    }

    /// Tape form of [`Self::score`]; returns an `N x 1` column.
    pub fn score_on_tape(self, tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
        match self {
            Self::Energy => energy_on_tape(tape, logits, temperature),
            Self::Confidence => confidence_on_tape(tape, logits),
            Self::Dst => dst_on_tape(tape, logits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub values: Vec<f64>,
    pub kind: EstimatorKind,
    pub modality: usize,
    pub temperature: f64,
}

fn check_classes(logits: &Matrix) -> Result<()> {
    if logits.cols() < 2 {
        return Err(Error::dim(format!(
            "uncertainty needs K >= 2 logits, got {}",
            logits.cols()
        )));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Energy score per row. Higher means more uncertain.
pub fn energy_score(logits: &Matrix, temperature: f64) -> Result<UncertaintyScore> {
    check_temperature(temperature)?;
    check_classes(logits)?;
    let values = (0..logits.rows())
        .map(|r| -temperature * lse_and_softmax(logits.row(r), temperature).0)
        .collect();
    Ok(UncertaintyScore {
        values,
        kind: EstimatorKind::Energy,
        modality: 0,
        temperature,
    })
}

pub fn confidence_uncertainty(logits: &Matrix) -> Result<UncertaintyScore> {
    check_classes(logits)?;
    let values = (0..logits.rows())
        .map(|r| {
            let (_, p) = lse_and_softmax(logits.row(r), 1.0);
            1.0 - p.iter().copied().fold(0.0, f64::max)
        })
        .collect();
    Ok(UncertaintyScore {
        values,
        kind: EstimatorKind::Confidence,
        modality: 0,
        temperature: 1.0,
    })
}

pub fn dst_uncertainty(logits: &Matrix) -> Result<UncertaintyScore> {
    check_classes(logits)?;
    let k = logits.cols() as f64;
    let values = (0..logits.rows())
        .map(|r| {
            let s: f64 = logits.row(r).iter().map(|&z| softplus(z) + 1.0).sum();
            k / s
        })
        .collect();
    Ok(UncertaintyScore {
        values,
        kind: EstimatorKind::Dst,
        modality: 0,
        temperature: 1.0,
    })
}

pub fn energy_on_tape(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    check_classes(tape.value(logits))?;
    let lse = tape.logsumexp_rows(logits, temperature)?;
    Ok(tape.scale(lse, -1.0))
}

/// `1 - exp(z_top - logsumexp(z))`, with the top class fixed at the current argmax.
pub fn confidence_on_tape(tape: &mut Tape, logits: Var) -> Result<Var> {
    check_classes(tape.value(logits))?;
    let top = argmax_rows(tape.value(logits));
    let zt = tape.pick_cols(logits, &top)?;
    let lse = tape.logsumexp_rows(logits, 1.0)?;
    let log_p = tape.sub(zt, lse)?;
    let p = tape.exp(log_p);
    let neg = tape.scale(p, -1.0);
    Ok(tape.shift(neg, 1.0))
}

pub fn dst_on_tape(tape: &mut Tape, logits: Var) -> Result<Var> {
    check_classes(tape.value(logits))?;
    let k = tape.value(logits).cols() as f64;
    let e = tape.softplus(logits);
    let evidence = tape.row_sum(e);
    let s = tape.shift(evidence, k);
    let inv = tape.recip(s)?;
    Ok(tape.scale(inv, k))
}

/// Pearson correlation between uncertainty and per-sample loss.
pub fn assumption1_diagnostic(u: &UncertaintyScore, per_sample_loss: &[f64]) -> Result<f64> {
    if u.values.len() != per_sample_loss.len() {
        return Err(Error::dim(format!(
            "{} scores for {} losses",
            u.values.len(),
            per_sample_loss.len()
        )));
    }
    stats::pearson(&u.values, per_sample_loss)
}
