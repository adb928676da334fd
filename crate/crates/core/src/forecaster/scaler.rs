use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ForecastError, Result};

/// Per-feature min/max scaling fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub names: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Set for constant features, which map to 0 and scale by one.
    pub degenerate: Vec<bool>,
}

/// Fits on a `rows x features` matrix.
pub fn fit_scaler(names: &[&str], data: &Array2<f64>) -> Result<ScalerParams> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(ForecastError::EmptyData);
    }
    if names.len() != data.ncols() {
        return Err(ForecastError::Shape(format!(
            "{} names for {} features",
            names.len(),
            data.ncols()
        )));
    }
    let mut min = Vec::with_capacity(data.ncols());
    let mut max = Vec::with_capacity(data.ncols());
    let mut degenerate = Vec::with_capacity(data.ncols());
    for col in data.columns() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(ForecastError::Shape("non-finite training value".into()));
        }
        min.push(lo);
        max.push(hi);
        degenerate.push(hi <= lo);
    }
    Ok(ScalerParams {
        names: names.iter().map(|s| s.to_string()).collect(),
        min,
        max,
        degenerate,
    })
}

impl ScalerParams {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `max - min`, or one for a degenerate feature.
    pub fn range(&self, feature: usize) -> f64 {
        if self.degenerate[feature] {
            1.0
        } else {
            self.max[feature] - self.min[feature]
        }
    }

    /// `(x - min) / (max - min)`, unclipped.
    pub fn transform(&self, feature: usize, x: f64) -> f64 {
        (x - self.min[feature]) / self.range(feature)
    }

    pub fn inverse(&self, feature: usize, scaled: f64) -> f64 {
        scaled * self.range(feature) + self.min[feature]
    }

    /// Scales a spread (standard deviation) back to data units.
    pub fn inverse_spread(&self, feature: usize, scaled: f64) -> f64 {
        scaled * self.range(feature)
    }
}
