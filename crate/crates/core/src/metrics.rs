//! Point-forecast error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TpbError};

pub const MAPE_FLOOR: f64 = 1e-3;

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(TpbError::Shape(format!(
            "{} targets vs {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(TpbError::InvalidArgument("metrics need at least one entry".into()));
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    let sq: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    let abs: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum();
    Ok(abs / y.len() as f64)
}

/// Mean absolute percentage error over entries with `|y| ≥ floor`; smaller
/// targets are left out rather than clamped.
pub fn mape(y: &[f64], yhat: &[f64], floor: f64) -> Result<f64> {
    check(y, yhat)?;
    let (sum, count) = y
        .iter()
        .zip(yhat)
        .filter(|(a, _)| a.abs() >= floor)
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + ((a - b) / a).abs(), n + 1));
    if count == 0 {
        return Err(TpbError::InvalidArgument(format!(
            "every target is below the MAPE floor {floor}"
        )));
    }
    Ok(100.0 * sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
}

impl Metrics {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self> {
        Ok(Self {
            rmse: rmse(y, yhat)?,
            mae: mae(y, yhat)?,
            mape: mape(y, yhat, MAPE_FLOOR)?,
        })
    }
}
