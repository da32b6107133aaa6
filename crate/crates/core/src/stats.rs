//! Small descriptive statistics used across modules.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn std_population(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

/// Sample standard deviation (divides by `n - 1`); 0 for fewer than two values.
pub fn std_sample(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Population covariance. Exactly 0 when either input is constant.
pub fn covariance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("covariance of {} and {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::DegenerateInput("covariance of empty vectors".into()));
    }
    if is_constant(a) || is_constant(b) {
        return Ok(0.0);
    }
    let (ma, mb) = (mean(a), mean(b));
    Ok(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64)
}

pub fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Pearson correlation coefficient.
///
/// Fails with [`Error::DegenerateInput`] when either vector is constant or
/// shorter than three values.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("pearson of {} and {} values", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "pearson needs at least 3 samples, got {}",
            a.len()
        )));
    }
    if is_constant(a) || is_constant(b) {
        return Err(Error::DegenerateInput("pearson of a constant vector".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
