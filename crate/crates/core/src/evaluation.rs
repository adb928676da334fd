//! Scoring forecasters over a held-out span of a bundle.

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineError};
use crate::datastore::DatasetBundle;
use crate::exec::Execution;
use crate::forecaster::{self, FeatureFrame, ForecastError, ForecastRecord, TrainedModel};
use crate::metrics::{IntervalSet, MetricsError, MetricsReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation span {start} .. {end} holds no complete forecast day")]
    EmptySpan {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Day-aligned target starts whose whole horizon lies in `[start, end)` and
/// inside the bundle.
pub fn day_starts(
    bundle: &DatasetBundle,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    horizon: usize,
) -> Vec<DateTime<Utc>> {
    let origin = bundle.start();
    let end = end.min(bundle.end());
    let offset = (start - origin).num_hours();
    let first_day = if offset <= 0 { 0 } else { (offset + 23) / 24 };
    let mut out = Vec::new();
    let mut t = origin + TimeDelta::days(first_day);
    while t + TimeDelta::hours(horizon as i64) <= end {
        out.push(t);
        t += TimeDelta::days(1);
    }
    out
}

fn actuals_for(
    bundle: &DatasetBundle,
    starts: &[DateTime<Utc>],
    horizon: usize,
) -> Result<Vec<f64>> {
    let mut y = Vec::with_capacity(starts.len() * horizon);
    for &t in starts {
        let i0 = bundle.load.grid_offset(t).map_err(ForecastError::from)? as usize;
        y.extend_from_slice(&bundle.load.values[i0..i0 + horizon]);
    }
    Ok(y)
}

fn report(
    actuals: &[f64],
    mu: &[f64],
    bounds: Vec<(f64, f64)>,
    level: f64,
    unit: &str,
) -> Result<MetricsReport> {
    let iv = IntervalSet::new(bounds, level)?;
    Ok(MetricsReport::compute(actuals, mu, &iv, unit)?)
}

/// Forecasts every complete day in `[start, end)` and scores it against
/// the bundle's load.
pub fn evaluate_model(
    model: &TrainedModel,
    bundle: &DatasetBundle,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    level: f64,
    execution: Execution,
) -> Result<(MetricsReport, Vec<ForecastRecord>)> {
    let horizon = model.hyperparams.forecast_horizon;
    let starts = day_starts(bundle, start, end, horizon);
    if starts.is_empty() {
        return Err(EvalError::EmptySpan { start, end });
    }
    let frame = FeatureFrame::new(bundle, &model.scaler, &model.hyperparams)?;
    let contexts = starts
        .iter()
        .map(|&t| frame.context(t))
        .collect::<forecaster::Result<Vec<_>>>()?;
    let records = forecaster::predict_contexts(model, &contexts, level, execution)?;
    let actuals = actuals_for(bundle, &starts, horizon)?;
    let mu: Vec<f64> = records
        .iter()
        .flat_map(|r| r.steps.iter().map(|s| s.mu))
        .collect();
    let bounds = records
        .iter()
        .flat_map(|r| r.steps.iter().map(|s| (s.lower, s.upper)))
        .collect();
    Ok((
        report(&actuals, &mu, bounds, level, &bundle.load.unit)?,
        records,
    ))
}

/// Seasonal-naive over the same days, with a Gaussian interval whose scale
/// is the spread of weekly differences in the preceding history.
pub fn evaluate_seasonal_naive(
    bundle: &DatasetBundle,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    horizon: usize,
    level: f64,
) -> Result<MetricsReport> {
    let starts = day_starts(bundle, start, end, horizon);
    if starts.is_empty() {
        return Err(EvalError::EmptySpan { start, end });
    }
    let z = forecaster::z_score(level)?;
    let season = baselines::WEEK_HOURS;
    let first = bundle
        .load
        .grid_offset(starts[0])
        .map_err(ForecastError::from)? as usize;
    let sigma = baselines::seasonal_naive_sigma(&bundle.load.values[..first], season)?;
    let (mut mu, mut bounds) = (Vec::new(), Vec::new());
    for &t in &starts {
        let i0 = bundle.load.grid_offset(t).map_err(ForecastError::from)? as usize;
        for m in baselines::seasonal_naive(&bundle.load.values[..i0], season, horizon)? {
            mu.push(m);
            bounds.push((m - z * sigma, m + z * sigma));
        }
    }
    let actuals = actuals_for(bundle, &starts, horizon)?;
    report(&actuals, &mu, bounds, level, &bundle.load.unit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArSpec {
    pub p: usize,
    pub seasonal_lag: usize,
    pub d: usize,
}

impl ArSpec {
    /// ARIMA stand-in.
    pub const ARIMA: ArSpec = ArSpec {
        p: 24,
        seasonal_lag: 0,
        d: 1,
    };
    /// SARIMA stand-in.
    pub const SARIMA: ArSpec = ArSpec {
        p: 3,
        seasonal_lag: 168,
        d: 0,
    };
}

/// AR model fitted once on the load before `fit_end`, then rolled over each
/// day using the observed history up to that day.
pub fn evaluate_ar(
    bundle: &DatasetBundle,
    spec: ArSpec,
    fit_end: DateTime<Utc>,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    horizon: usize,
    level: f64,
) -> Result<MetricsReport> {
    let starts = day_starts(bundle, start, end, horizon);
    if starts.is_empty() {
        return Err(EvalError::EmptySpan { start, end });
    }
    let z = forecaster::z_score(level)?;
    let n_fit = bundle
        .load
        .grid_offset(fit_end)
        .map_err(ForecastError::from)?
        .clamp(0, bundle.len() as i64) as usize;
    let model = baselines::fit_ar(
        &bundle.load.values[..n_fit],
        spec.p,
        spec.seasonal_lag,
        spec.d,
    )?;
    let (mut mu, mut bounds) = (Vec::new(), Vec::new());
    for &t in &starts {
        let i0 = bundle.load.grid_offset(t).map_err(ForecastError::from)? as usize;
        let (m, s) = baselines::forecast_ar_with_sigma(&model, &bundle.load.values[..i0], horizon)?;
        for (m, s) in m.into_iter().zip(s) {
            mu.push(m);
            bounds.push((m - z * s, m + z * s));
        }
    }
    let actuals = actuals_for(bundle, &starts, horizon)?;
    report(&actuals, &mu, bounds, level, &bundle.load.unit)
}
