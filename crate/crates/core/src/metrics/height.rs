//! Per-pixel height regression metrics.

use super::{MetricsError, Result};

pub const DELTA1_THRESHOLD: f64 = 1.25;
/// Heights are floored at this many meters before ratios are formed.
pub const DEFAULT_FLOOR_EPS: f64 = 1.0;

/// Outcome of the threshold-accuracy test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Delta1 {
    /// `N_t / N_total`.
    pub fraction: f64,
    /// Pixels where at least one operand reached `floor_eps`, i.e. where the
    /// ratio was not fixed at 1 by flooring alone.
    pub n_valid: usize,
    pub n_total: usize,
}

fn same_len(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Fraction of pixels with `max(y/ŷ, ŷ/y) < threshold`.
///
/// Negative predictions are clamped to zero, then both operands are floored
/// at `floor_eps` so that zero heights give a finite ratio.
pub fn delta1(pred: &[f64], gt: &[f64], threshold: f64, floor_eps: f64) -> Result<Delta1> {
    same_len(pred, gt)?;
    if !(threshold > 1.0) {
        return Err(MetricsError::InvalidArgument(format!(
            "delta threshold must exceed 1, got {threshold}"
        )));
    }
    if !(floor_eps > 0.0) {
        return Err(MetricsError::InvalidArgument(format!(
            "floor_eps must be positive, got {floor_eps}"
        )));
    }
    let mut hits = 0usize;
    let mut n_valid = 0usize;
    for (p, y) in pred.iter().zip(gt) {
        let p = p.max(0.0);
        if p >= floor_eps || *y >= floor_eps {
            n_valid += 1;
        }
        let (p, y) = (p.max(floor_eps), y.max(floor_eps));
        if (y / p).max(p / y) < threshold {
            hits += 1;
        }
    }
    Ok(Delta1 {
        fraction: hits as f64 / pred.len() as f64,
        n_valid,
        n_total: pred.len(),
    })
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(pred, gt)?;
    let ss: f64 = pred.iter().zip(gt).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(p, y)| (p - y).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(pred, gt)?;
    let mean = gt.iter().sum::<f64>() / gt.len() as f64;
    let ss_tot: f64 = gt.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::UndefinedVariance);
    }
    let ss_res: f64 = pred.iter().zip(gt).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightMetricsReport {
    pub delta1: f64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n_total: usize,
    pub n_valid: usize,
}

impl HeightMetricsReport {
    /// All height metrics over the pooled pixels of `pred` and `gt`.
    pub fn compute(pred: &[f64], gt: &[f64]) -> Result<Self> {
        let d = delta1(pred, gt, DELTA1_THRESHOLD, DEFAULT_FLOOR_EPS)?;
        Ok(Self {
            delta1: d.fraction,
            rmse: rmse(pred, gt)?,
            mae: mae(pred, gt)?,
            r2: r2(pred, gt)?,
            n_total: d.n_total,
            n_valid: d.n_valid,
        })
    }
}
