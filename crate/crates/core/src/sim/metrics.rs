//! Root relative mean squared errors.

use nalgebra::DMatrix;

use crate::error::{FlmmError, Result};

fn check(truth: &[f64], est: &[f64]) -> Result<()> {
    if truth.len() != est.len() {
        return Err(FlmmError::Dimension(format!(
            "{} true values against {} estimates",
            truth.len(),
            est.len()
        )));
    }
    if truth.is_empty() {
        return Err(FlmmError::Dimension("empty input".into()));
    }
    Ok(())
}

/// `|θ - θ̂| / |θ|`
pub fn rrmse_scalar(truth: f64, est: f64) -> Result<f64> {
    rrmse_vector(&[truth], &[est])
}

/// `sqrt( Σ(θ - θ̂)² / Σθ² )`
pub fn rrmse_vector(truth: &[f64], est: &[f64]) -> Result<f64> {
    check(truth, est)?;
    let den: f64 = truth.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(FlmmError::ZeroDenominator);
    }
    let num: f64 = truth.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((num / den).sqrt())
}

/// Function version on an equidistant evaluation grid.
pub fn rrmse_function(truth: &[f64], est: &[f64]) -> Result<f64> {
    rrmse_vector(truth, est)
}

/// Surface version over all grid pairs.
pub fn rrmse_surface(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != est.shape() {
        return Err(FlmmError::Dimension(format!("{:?} against {:?}", truth.shape(), est.shape())));
    }
    rrmse_vector(truth.as_slice(), est.as_slice())
}

/// Eigenfunction version: the smaller error of `est` and `-est`, with the
/// chosen sign.
pub fn rrmse_eigenfunction(truth: &[f64], est: &[f64]) -> Result<(f64, f64)> {
    let plus = rrmse_function(truth, est)?;
    let flipped: Vec<f64> = est.iter().map(|v| -v).collect();
    let minus = rrmse_function(truth, &flipped)?;
    Ok(if minus < plus { (minus, -1.0) } else { (plus, 1.0) })
}
