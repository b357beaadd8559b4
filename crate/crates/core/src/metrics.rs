//! Extrapolation accuracy metrics over paired grids.

use crate::error::{Error, Result};
use crate::grid::GridSolution;
use serde::{Deserialize, Serialize};

fn check_pair(pred: &[f64], reference: &[f64]) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} values, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::argument("metrics need at least one value"));
    }
    Ok(())
}

/// `‖pred − ref‖₂ / ‖ref‖₂`.
pub fn relative_l2(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference)?;
    let den = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::argument("relative L2 is undefined for a zero reference"));
    }
    let num = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum::<f64>().sqrt();
    Ok(num / den)
}

/// `1 − Σ(u − û)² / Σ(u − ū)²`.
pub fn explained_variance(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference)?;
    let mean = reference.iter().sum::<f64>() / reference.len() as f64;
    let total: f64 = reference.iter().map(|r| (r - mean) * (r - mean)).sum();
    if total == 0.0 {
        return Err(Error::argument("explained variance is undefined for a constant reference"));
    }
    let resid: f64 = pred.iter().zip(reference).map(|(p, r)| (r - p) * (r - p)).sum();
    Ok(1.0 - resid / total)
}

pub fn max_error(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference)?;
    Ok(pred.iter().zip(reference).map(|(p, r)| (p - r).abs()).fold(0.0, f64::max))
}

pub fn mean_absolute_error(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference)?;
    Ok(pred.iter().zip(reference).map(|(p, r)| (p - r).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub relative_l2: f64,
    pub explained_variance: f64,
    pub max_error: f64,
    pub mae: f64,
}

impl MetricSet {
    pub fn compute(pred: &[f64], reference: &[f64]) -> Result<Self> {
        Ok(MetricSet {
            relative_l2: relative_l2(pred, reference)?,
            explained_variance: explained_variance(pred, reference)?,
            max_error: max_error(pred, reference)?,
            mae: mean_absolute_error(pred, reference)?,
        })
    }

    /// True when `self` is no worse than `other` on every metric.
    pub fn dominates(&self, other: &MetricSet) -> bool {
        self.relative_l2 <= other.relative_l2
            && self.explained_variance >= other.explained_variance
            && self.max_error <= other.max_error
            && self.mae <= other.mae
    }

    pub const NAMES: [&'static str; 4] = ["relative_l2", "explained_variance", "max_error", "mae"];

    pub fn values(&self) -> [f64; 4] {
        [self.relative_l2, self.explained_variance, self.max_error, self.mae]
    }
}

/// Metrics of two grids that must share times, xs and channel layout
/// exactly.
pub fn grid_metrics(pred: &GridSolution, reference: &GridSolution) -> Result<MetricSet> {
    if pred.times != reference.times || pred.xs != reference.xs || pred.n_channels != reference.n_channels {
        return Err(Error::Dimension(format!(
            "grids differ: {}×{}×{} vs {}×{}×{} or their coordinates disagree",
            pred.k_t(),
            pred.n_channels,
            pred.k_x(),
            reference.k_t(),
            reference.n_channels,
            reference.k_x()
        )));
    }
    MetricSet::compute(pred.values.data(), reference.values.data())
}

/// Primary metrics plus, for two-channel grids, the metrics of `|u|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub primary: MetricSet,
    pub magnitude: Option<MetricSet>,
}

pub fn evaluate(pred: &GridSolution, reference: &GridSolution) -> Result<EvaluationReport> {
    let primary = grid_metrics(pred, reference)?;
    let magnitude = if pred.n_channels == 2 {
        Some(grid_metrics(&pred.magnitude()?, &reference.magnitude()?)?)
    } else {
        None
    };
    Ok(EvaluationReport { primary, magnitude })
}
