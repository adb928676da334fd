use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Uniformly sampled series: `timestamp(i) = start + i * step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub series_id: String,
    pub start: DateTime<Utc>,
    pub step_seconds: i64,
    pub unit: String,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(
        series_id: impl Into<String>,
        start: DateTime<Utc>,
        step: TimeDelta,
        unit: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let series_id = series_id.into();
        validate_id(&series_id)?;
        if step <= TimeDelta::zero() {
            return Err(DataError::Alignment(format!(
                "non-positive step for {series_id}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                series_id,
                index: i,
            });
        }
        Ok(Self {
            series_id,
            start,
            step_seconds: step.num_seconds(),
            unit: unit.into(),
            values,
        })
    }

    pub fn hourly(
        series_id: impl Into<String>,
        start: DateTime<Utc>,
        unit: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::new(series_id, start, TimeDelta::hours(1), unit, values)
    }

    pub fn step(&self) -> TimeDelta {
        TimeDelta::seconds(self.step_seconds)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + TimeDelta::seconds(self.step_seconds * i as i64)
    }

    /// One past the last stored timestamp.
    pub fn end(&self) -> DateTime<Utc> {
        self.timestamp(self.len())
    }

    /// Grid index of `t`, which may lie outside the stored span.
    pub fn grid_offset(&self, t: DateTime<Utc>) -> Result<i64> {
        let secs = (t - self.start).num_seconds();
        if secs % self.step_seconds != 0 {
            return Err(DataError::Alignment(format!(
                "{t} is not on the grid of {} (start {}, step {}s)",
                self.series_id, self.start, self.step_seconds
            )));
        }
        Ok(secs / self.step_seconds)
    }

    /// Points with `start <= t < end`. Bounds must lie on the grid; the
    /// result is clamped to the stored span.
    pub fn slice(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<TimeSeries> {
        if end < start {
            return Err(DataError::Alignment(format!(
                "range end {end} precedes start {start}"
            )));
        }
        let lo = self.grid_offset(start)?.clamp(0, self.len() as i64) as usize;
        let hi = self.grid_offset(end)?.clamp(0, self.len() as i64) as usize;
        let hi = hi.max(lo);
        Ok(TimeSeries {
            series_id: self.series_id.clone(),
            start: self.timestamp(lo),
            step_seconds: self.step_seconds,
            unit: self.unit.clone(),
            values: self.values[lo..hi].to_vec(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (DateTime<Utc>, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| (self.timestamp(i), v))
    }
}

/// Series ids double as file names in the store.
pub(crate) fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(DataError::InvalidId(id.to_string()))
    }
}
