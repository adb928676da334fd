//! Feature construction and sliding windows.
//!
//! Encoder rows carry every scaled series (load first) followed by six
//! calendar features; decoder rows carry the calendar features and, when
//! future weather is treated as known, the scaled covariates.

use std::f64::consts::PI;

use chrono::{DateTime, Datelike, FixedOffset, TimeDelta, Timelike, Utc};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::scaler::{fit_scaler, ScalerParams};
use super::{ForecastError, Hyperparams, Result};
use crate::datastore::{Covariate, DatasetBundle};

pub const CALENDAR_FEATURES: usize = 6;
pub const LOAD_FEATURE: &str = "load";

/// sin/cos of hour-of-day, day-of-week and month, in the display offset.
pub fn calendar_features(t: DateTime<Utc>, utc_offset_minutes: i32) -> [f64; 6] {
    let offset =
        FixedOffset::east_opt(utc_offset_minutes * 60).unwrap_or(FixedOffset::east_opt(0).unwrap());
    let local = t.with_timezone(&offset);
    let hour = local.hour() as f64 + local.minute() as f64 / 60.0;
    let dow = local.weekday().num_days_from_monday() as f64;
    let month = local.month0() as f64;
    let (hs, hc) = (2.0 * PI * hour / 24.0).sin_cos();
    let (ds, dc) = (2.0 * PI * dow / 7.0).sin_cos();
    let (ms, mc) = (2.0 * PI * month / 12.0).sin_cos();
    [hs, hc, ds, dc, ms, mc]
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub target_start: DateTime<Utc>,
    /// `history x encoder_features`
    pub encoder: Array2<f64>,
    /// `horizon x decoder_features`
    pub decoder: Array2<f64>,
    /// Scaled load over the horizon.
    pub target: Vec<f64>,
    pub weight: f64,
}

/// Inputs for one forecast, without a target.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastContext {
    pub target_start: DateTime<Utc>,
    pub encoder: Array2<f64>,
    pub decoder: Array2<f64>,
}

/// Chronological split by target window: train targets end before
/// `validation_start`, validation before `test_start`, test before
/// `test_end`. Encoder context may reach back across a boundary since it
/// only carries past inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_start: DateTime<Utc>,
    pub test_start: DateTime<Utc>,
    pub test_end: DateTime<Utc>,
}

impl SplitSpec {
    /// Everything is training data.
    pub fn train_only(bundle: &DatasetBundle) -> Self {
        let end = bundle.end();
        Self {
            validation_start: end,
            test_start: end,
            test_end: end,
        }
    }

    /// Holds out the last `test_days`, then the last `validation_fraction`
    /// (rounded to whole days, at least one) of what remains after the
    /// first `history` hours.
    pub fn chronological(
        bundle: &DatasetBundle,
        hp: &Hyperparams,
        test_days: usize,
        validation_fraction: f64,
    ) -> Self {
        let end = bundle.end();
        let test_start = end - TimeDelta::days(test_days as i64);
        let first_target = bundle.start() + TimeDelta::hours(hp.history_horizon as i64);
        let target_days = ((test_start - first_target).num_hours().max(0) / 24) as f64;
        let val_days = ((target_days * validation_fraction).round() as i64).max(1);
        Self {
            validation_start: test_start - TimeDelta::days(val_days),
            test_start,
            test_end: end,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WindowSet {
    pub scaler: ScalerParams,
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Feature names in encoder column order.
pub fn encoder_feature_names(bundle: &DatasetBundle) -> Vec<String> {
    let mut names = vec![LOAD_FEATURE.to_string()];
    names.extend(covariates_of(bundle).iter().map(|c| c.id().to_string()));
    names.extend(
        [
            "hour_sin",
            "hour_cos",
            "dow_sin",
            "dow_cos",
            "month_sin",
            "month_cos",
        ]
        .map(String::from),
    );
    names
}

fn covariates_of(bundle: &DatasetBundle) -> Vec<Covariate> {
    Covariate::ALL
        .into_iter()
        .filter(|c| bundle.covariates.contains_key(c))
        .collect()
}

pub fn decoder_feature_count(scaler: &ScalerParams, hp: &Hyperparams) -> usize {
    CALENDAR_FEATURES
        + if hp.known_future_weather {
            scaler.names.len() - 1
        } else {
            0
        }
}

/// Scaled series and calendar features over a whole bundle.
pub struct FeatureFrame<'a> {
    bundle: &'a DatasetBundle,
    hp: &'a Hyperparams,
    /// `hours x (1 + covariates)`, load first.
    scaled: Array2<f64>,
    calendar: Array2<f64>,
}

impl<'a> FeatureFrame<'a> {
    pub fn new(
        bundle: &'a DatasetBundle,
        scaler: &ScalerParams,
        hp: &'a Hyperparams,
    ) -> Result<Self> {
        let raw = raw_matrix(bundle);
        let expected: Vec<&str> = std::iter::once(LOAD_FEATURE)
            .chain(covariates_of(bundle).iter().map(|c| c.id()))
            .collect();
        if scaler.names != expected {
            return Err(ForecastError::Shape(format!(
                "scaler features {:?} do not match bundle {:?}",
                scaler.names, expected
            )));
        }
        let mut scaled = raw;
        for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|x| scaler.transform(j, x));
        }
        let n = bundle.len();
        let mut calendar = Array2::zeros((n, CALENDAR_FEATURES));
        for i in 0..n {
            let f = calendar_features(bundle.load.timestamp(i), hp.utc_offset_minutes);
            calendar.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
        }
        Ok(Self {
            bundle,
            hp,
            scaled,
            calendar,
        })
    }

    fn index_of(&self, t: DateTime<Utc>) -> Result<i64> {
        self.bundle.load.grid_offset(t).map_err(ForecastError::from)
    }

    /// Encoder/decoder inputs for the horizon starting at `target_start`.
    pub fn context(&self, target_start: DateTime<Utc>) -> Result<ForecastContext> {
        let (hist, hor) = (
            self.hp.history_horizon as i64,
            self.hp.forecast_horizon as i64,
        );
        let i0 = self.index_of(target_start)?;
        let n = self.bundle.len() as i64;
        if i0 - hist < 0 || i0 > n {
            return Err(ForecastError::InsufficientData(format!(
                "no complete {hist}h context before {target_start}"
            )));
        }
        let weather = self.hp.known_future_weather && self.scaled.ncols() > 1;
        if i0 + hor > n && weather {
            return Err(ForecastError::InsufficientData(format!(
                "weather for {target_start} + {hor}h is not available"
            )));
        }
        let (a, b) = ((i0 - hist) as usize, i0 as usize);
        let enc_cols = self.scaled.ncols() + CALENDAR_FEATURES;
        let mut encoder = Array2::zeros((hist as usize, enc_cols));
        encoder
            .slice_mut(s![.., ..self.scaled.ncols()])
            .assign(&self.scaled.slice(s![a..b, ..]));
        encoder
            .slice_mut(s![.., self.scaled.ncols()..])
            .assign(&self.calendar.slice(s![a..b, ..]));

        let dec_cols = CALENDAR_FEATURES
            + if self.hp.known_future_weather {
                self.scaled.ncols() - 1
            } else {
                0
            };
        let mut decoder = Array2::zeros((hor as usize, dec_cols));
        for k in 0..hor {
            let t = target_start + TimeDelta::hours(k);
            let idx = (i0 + k) as usize;
            let cal = if idx < self.bundle.len() {
                self.calendar.row(idx).to_vec()
            } else {
                calendar_features(t, self.hp.utc_offset_minutes).to_vec()
            };
            let mut row = decoder.row_mut(k as usize);
            for (j, v) in cal.into_iter().enumerate() {
                row[j] = v;
            }
            if self.hp.known_future_weather {
                for j in 1..self.scaled.ncols() {
                    row[CALENDAR_FEATURES + j - 1] = self.scaled[[idx, j]];
                }
            }
        }
        Ok(ForecastContext {
            target_start,
            encoder,
            decoder,
        })
    }

    /// A full training window; the target must be inside the bundle.
    pub fn window(&self, target_start: DateTime<Utc>, weight: f64) -> Result<WindowSample> {
        let ctx = self.context(target_start)?;
        let i0 = self.index_of(target_start)? as usize;
        let hor = self.hp.forecast_horizon;
        if i0 + hor > self.bundle.len() {
            return Err(ForecastError::InsufficientData(format!(
                "no actuals for {target_start}"
            )));
        }
        Ok(WindowSample {
            target_start,
            encoder: ctx.encoder,
            decoder: ctx.decoder,
            target: self.scaled.slice(s![i0..i0 + hor, 0]).to_vec(),
            weight,
        })
    }

    /// Replaces the target of a window with externally supplied actuals
    /// (data units).
    pub fn window_with_actuals(
        &self,
        target_start: DateTime<Utc>,
        actuals: &[f64],
        scaler: &ScalerParams,
        weight: f64,
    ) -> Result<WindowSample> {
        if actuals.len() != self.hp.forecast_horizon {
            return Err(ForecastError::Shape(format!(
                "{} actuals for a {}h horizon",
                actuals.len(),
                self.hp.forecast_horizon
            )));
        }
        let ctx = self.context(target_start)?;
        Ok(WindowSample {
            target_start,
            encoder: ctx.encoder,
            decoder: ctx.decoder,
            target: actuals.iter().map(|&y| scaler.transform(0, y)).collect(),
            weight,
        })
    }
}

fn raw_matrix(bundle: &DatasetBundle) -> Array2<f64> {
    let covs = covariates_of(bundle);
    let mut m = Array2::zeros((bundle.len(), 1 + covs.len()));
    for (i, v) in bundle.load.values.iter().enumerate() {
        m[[i, 0]] = *v;
    }
    for (j, c) in covs.iter().enumerate() {
        for (i, v) in bundle.covariates[c].values.iter().enumerate() {
            m[[i, j + 1]] = *v;
        }
    }
    m
}

fn check_day_aligned(bundle: &DatasetBundle, t: DateTime<Utc>) -> Result<()> {
    if (t - bundle.start()).num_seconds() % 86_400 != 0 {
        return Err(ForecastError::Shape(format!(
            "split boundary {t} is not on a day boundary"
        )));
    }
    Ok(())
}

/// Fits the scaler on the training span and cuts sliding windows (stride
/// `hp.stride_hours`) for every split.
pub fn make_windows(
    bundle: &DatasetBundle,
    hp: &Hyperparams,
    split: &SplitSpec,
) -> Result<WindowSet> {
    hp.validate()?;
    let (hist, hor) = (hp.history_horizon, hp.forecast_horizon);
    if bundle.len() < hist + hor {
        return Err(ForecastError::InsufficientData(format!(
            "{} hours of data, need at least {}",
            bundle.len(),
            hist + hor
        )));
    }
    for t in [split.validation_start, split.test_start, split.test_end] {
        check_day_aligned(bundle, t)?;
    }
    if !(split.validation_start <= split.test_start
        && split.test_start <= split.test_end
        && split.test_end <= bundle.end())
    {
        return Err(ForecastError::Shape("split boundaries out of order".into()));
    }

    let raw = raw_matrix(bundle);
    let train_rows = bundle
        .load
        .grid_offset(split.validation_start)?
        .clamp(0, bundle.len() as i64) as usize;
    let names: Vec<String> = std::iter::once(LOAD_FEATURE.to_string())
        .chain(covariates_of(bundle).iter().map(|c| c.id().to_string()))
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let scaler = fit_scaler(&name_refs, &raw.slice(s![..train_rows, ..]).to_owned())?;

    let frame = FeatureFrame::new(bundle, &scaler, hp)?;
    let mut set = WindowSet {
        scaler: scaler.clone(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    let mut offset = hist;
    while offset + hor <= bundle.len() {
        let start = bundle.load.timestamp(offset);
        let end = bundle.load.timestamp(offset + hor);
        let bucket = if end <= split.validation_start {
            Some(&mut set.train)
        } else if start >= split.validation_start && end <= split.test_start {
            Some(&mut set.validation)
        } else if start >= split.test_start && end <= split.test_end {
            Some(&mut set.test)
        } else {
            None
        };
        if let Some(bucket) = bucket {
            bucket.push(frame.window(start, 1.0)?);
        }
        offset += hp.stride_hours;
    }
    if set.train.is_empty() && set.validation.is_empty() && set.test.is_empty() {
        return Err(ForecastError::InsufficientData(
            "no complete windows".into(),
        ));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{generate_synthetic, SyntheticConfig};
    use chrono::TimeZone;

    fn bundle(days: usize) -> DatasetBundle {
        let cfg = SyntheticConfig {
            n_days: days.max(14),
            rare_event_count: 0,
            ..SyntheticConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        b.slice(b.start(), b.start() + TimeDelta::days(days as i64))
            .unwrap()
    }

    #[test]
    fn twenty_days_give_thirteen_windows() {
        let b = bundle(20);
        let hp = Hyperparams::default();
        let set = make_windows(&b, &hp, &SplitSpec::train_only(&b)).unwrap();
        assert_eq!(set.train.len(), 13);
        let w = &set.train[0];
        assert_eq!(w.encoder.dim(), (168, 11));
        assert_eq!(w.decoder.dim(), (24, 10));
        assert_eq!(w.target.len(), 24);
        assert_eq!(w.target_start, b.start() + TimeDelta::days(7));
        // encoder's last load row is the hour just before the target
        let s = &set.scaler;
        let prev = b.load.values[7 * 24 - 1];
        assert!((w.encoder[[167, 0]] - s.transform(0, prev)).abs() < 1e-15);
    }

    #[test]
    fn seven_days_is_insufficient() {
        let b = bundle(7);
        let hp = Hyperparams::default();
        assert!(matches!(
            make_windows(&b, &hp, &SplitSpec::train_only(&b)),
            Err(ForecastError::InsufficientData(_))
        ));
    }

    #[test]
    fn hour_six_encoding() {
        let t = Utc.with_ymd_and_hms(2023, 5, 3, 6, 0, 0).unwrap();
        let f = calendar_features(t, 0);
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert!(f[1].abs() < 1e-12);
        // display offset shifts the hour
        let g = calendar_features(t, 6 * 60);
        assert!((g[0] - 0.0).abs() < 1e-12 && (g[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn splits_are_disjoint_and_scaler_uses_train_only() {
        let b = bundle(40);
        let hp = Hyperparams::default();
        let split = SplitSpec::chronological(&b, &hp, 7, 0.1);
        let set = make_windows(&b, &hp, &split).unwrap();
        assert_eq!(set.test.len(), 7);
        assert_eq!(set.train.len() + set.validation.len() + set.test.len(), 33);
        assert!(set
            .train
            .iter()
            .all(|w| w.target_start < split.validation_start));
        assert!(set.test.iter().all(|w| w.target_start >= split.test_start));
        let train_rows = (split.validation_start - b.start()).num_hours() as usize;
        let max = b.load.values[..train_rows]
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max);
        assert_eq!(set.scaler.max[0], max);
    }

    #[test]
    fn unaligned_split_rejected() {
        let b = bundle(20);
        let hp = Hyperparams::default();
        let mut split = SplitSpec::train_only(&b);
        split.validation_start = b.start() + TimeDelta::hours(200);
        assert!(make_windows(&b, &hp, &split).is_err());
    }
}
