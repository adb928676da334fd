use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::network::ShardMasks;
use super::train::TrainedModel;
use super::{FeatureFrame, ForecastContext, ForecastError, Result, WindowSample};
use crate::autodiff::Session;
use crate::datastore::DatasetBundle;
use crate::exec::Execution;

/// Scaled inputs outside this range suggest unscaled or corrupt data.
pub const SCALE_WARNING_RANGE: (f64, f64) = (-1.0, 2.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastStep {
    pub timestamp: DateTime<Utc>,
    pub mu: f64,
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
}

/// A day-ahead forecast in data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub model_id: String,
    /// End of the history window the forecast was conditioned on.
    pub issue_time: DateTime<Utc>,
    pub target_start: DateTime<Utc>,
    pub level: f64,
    pub steps: Vec<ForecastStep>,
}

impl ForecastRecord {
    pub fn mu(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mu).collect()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.sigma).collect()
    }

    pub fn max_sigma(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.sigma)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same forecast with bounds recomputed at another level.
    pub fn with_level(&self, level: f64) -> Result<Self> {
        let z = z_score(level)?;
        let mut r = self.clone();
        r.level = level;
        for s in &mut r.steps {
            s.lower = s.mu - z * s.sigma;
            s.upper = s.mu + z * s.sigma;
        }
        Ok(r)
    }
}

/// Two-sided standard-normal quantile for a central interval at `level`.
pub fn z_score(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ForecastError::Level(level));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// `(mu - z sigma, mu + z sigma)` per step.
pub fn prediction_interval(mu: &[f64], sigma: &[f64], level: f64) -> Result<Vec<(f64, f64)>> {
    if mu.len() != sigma.len() {
        return Err(ForecastError::Shape(format!(
            "{} means, {} sigmas",
            mu.len(),
            sigma.len()
        )));
    }
    let z = z_score(level)?;
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| (m - z * s, m + z * s))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleWarning {
    pub target_start: DateTime<Utc>,
    pub input: &'static str,
    pub row: usize,
    pub column: usize,
    pub value: f64,
}

/// Flags scaled inputs far outside the training range. Non-fatal.
pub fn check_scale(ctx: &ForecastContext) -> Vec<ScaleWarning> {
    let (lo, hi) = SCALE_WARNING_RANGE;
    let mut out = Vec::new();
    for (input, m) in [("encoder", &ctx.encoder), ("decoder", &ctx.decoder)] {
        for ((row, column), &value) in m.indexed_iter() {
            if !(lo..=hi).contains(&value) {
                out.push(ScaleWarning {
                    target_start: ctx.target_start,
                    input,
                    row,
                    column,
                    value,
                });
            }
        }
    }
    out
}

/// Forecast for the horizon starting at `target_start`, using the 168 hours
/// before it from `bundle`.
pub fn predict_day_ahead(
    model: &TrainedModel,
    bundle: &DatasetBundle,
    target_start: DateTime<Utc>,
    level: f64,
) -> Result<ForecastRecord> {
    let frame = FeatureFrame::new(bundle, &model.scaler, &model.hyperparams)?;
    let ctx = frame.context(target_start)?;
    let mut out = predict_contexts(
        model,
        std::slice::from_ref(&ctx),
        level,
        Execution::Sequential,
    )?;
    Ok(out.pop().expect("one record per context"))
}

pub fn predict_contexts(
    model: &TrainedModel,
    contexts: &[ForecastContext],
    level: f64,
    execution: Execution,
) -> Result<Vec<ForecastRecord>> {
    let samples: Vec<WindowSample> = contexts
        .iter()
        .map(|c| WindowSample {
            target_start: c.target_start,
            encoder: c.encoder.clone(),
            decoder: c.decoder.clone(),
            target: Vec::new(),
            weight: 1.0,
        })
        .collect();
    predict_batch(model, &samples, level, execution)
}

/// Forecasts for prepared windows; targets, if present, are ignored.
pub fn predict_batch(
    model: &TrainedModel,
    samples: &[WindowSample],
    level: f64,
    execution: Execution,
) -> Result<Vec<ForecastRecord>> {
    let z = z_score(level)?;
    let dims = model.dims;
    for s in samples {
        if s.encoder.dim() != (dims.history, dims.enc_features)
            || s.decoder.dim() != (dims.horizon, dims.dec_features)
        {
            return Err(ForecastError::Shape(format!(
                "context at {} has encoder {:?} / decoder {:?}",
                s.target_start,
                s.encoder.dim(),
                s.decoder.dim()
            )));
        }
        if s.encoder
            .iter()
            .chain(s.decoder.iter())
            .any(|v| !v.is_finite())
        {
            return Err(ForecastError::InsufficientData(format!(
                "context at {} has gaps",
                s.target_start
            )));
        }
        let ctx = ForecastContext {
            target_start: s.target_start,
            encoder: s.encoder.clone(),
            decoder: s.decoder.clone(),
        };
        let warnings = check_scale(&ctx);
        if let Some(w) = warnings.first() {
            log::warn!(
                "{} scaled inputs outside [{}, {}] for {} (first: {} row {} col {} = {})",
                warnings.len(),
                SCALE_WARNING_RANGE.0,
                SCALE_WARNING_RANGE.1,
                w.target_start,
                w.input,
                w.row,
                w.column,
                w.value
            );
        }
    }
    let net = model.network();
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let shards: Vec<&[&WindowSample]> = refs.chunks(model.hyperparams.shard_size).collect();
    let outputs = execution.map(&shards, |shard| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let n = shard.len();
        let b = net.bind(
            &model.params,
            shard,
            ShardMasks::inference(&dims, n),
            false,
            1.0,
        );
        let mut s = Session::new(&net.tape, &b);
        s.forward()?;
        let mu = s.value(net.mu).expect("forward computed mu");
        let var = s.value(net.variance).expect("forward computed variance");
        Ok((0..n)
            .map(|r| {
                let m = (0..dims.horizon).map(|t| mu[[t * n + r, 0]]).collect();
                let v = (0..dims.horizon).map(|t| var[[t * n + r, 0]]).collect();
                (m, v)
            })
            .collect())
    });
    let mut records = Vec::with_capacity(samples.len());
    let mut it = samples.iter();
    for shard in outputs {
        for (mu_s, var_s) in shard? {
            let sample = it.next().expect("one output per sample");
            let steps = mu_s
                .iter()
                .zip(&var_s)
                .enumerate()
                .map(|(t, (&m, &v))| {
                    let mu = model.scaler.inverse(0, m);
                    let sigma = model.scaler.inverse_spread(0, v.sqrt());
                    ForecastStep {
                        timestamp: sample.target_start + TimeDelta::hours(t as i64),
                        mu,
                        sigma,
                        lower: mu - z * sigma,
                        upper: mu + z * sigma,
                    }
                })
                .collect();
            records.push(ForecastRecord {
                model_id: model.id().to_string(),
                issue_time: sample.target_start,
                target_start: sample.target_start,
                level,
                steps,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_for_95_percent() {
        assert!((z_score(0.95).unwrap() - 1.959964).abs() < 1e-6);
        assert!(matches!(z_score(1.0), Err(ForecastError::Level(_))));
        assert!(matches!(z_score(0.0), Err(ForecastError::Level(_))));
    }

    #[test]
    fn interval_examples() {
        let iv = prediction_interval(&[100.0], &[10.0], 0.95).unwrap();
        assert!((iv[0].0 - 80.40).abs() < 5e-3 && (iv[0].1 - 119.60).abs() < 5e-3);
        let one = prediction_interval(&[0.0], &[1.0], 0.6827).unwrap();
        assert!((one[0].0 + 1.0).abs() < 1e-3 && (one[0].1 - 1.0).abs() < 1e-3);
        let floor = 1e-6_f64;
        let z = z_score(0.95).unwrap();
        let fl = prediction_interval(&[3.0], &[floor.sqrt()], 0.95).unwrap();
        assert!(((fl[0].1 - fl[0].0) - 2.0 * z * floor.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn wider_level_wider_interval() {
        let a = prediction_interval(&[5.0], &[2.0], 0.5).unwrap()[0];
        let b = prediction_interval(&[5.0], &[2.0], 0.9).unwrap()[0];
        assert!(b.1 - b.0 > a.1 - a.0);
    }
}
