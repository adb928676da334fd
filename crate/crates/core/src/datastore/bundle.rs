use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{DataError, Result, TimeSeries};

/// Weather covariates the forecaster knows how to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Temperature,
    WindSpeed,
    WindDirection,
    Precipitation,
}

impl Covariate {
    pub const ALL: [Covariate; 4] = [
        Covariate::Temperature,
        Covariate::WindSpeed,
        Covariate::WindDirection,
        Covariate::Precipitation,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Covariate::Temperature => "temperature",
            Covariate::WindSpeed => "wind_speed",
            Covariate::WindDirection => "wind_direction",
            Covariate::Precipitation => "precipitation",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Covariate::Temperature => "degC",
            Covariate::WindSpeed => "m/s",
            Covariate::WindDirection => "deg",
            Covariate::Precipitation => "mm",
        }
    }

    pub fn from_id(id: &str) -> Option<Covariate> {
        Covariate::ALL.into_iter().find(|c| c.id() == id)
    }
}

/// A window of unusual conditions (e.g. a heat wave), `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RareEvent {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

/// Load plus covariates on one shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub load: TimeSeries,
    pub covariates: BTreeMap<Covariate, TimeSeries>,
    pub calendar_origin: DateTime<Utc>,
    /// Known rare-event windows (populated by the synthetic generator).
    #[serde(default)]
    pub events: Vec<RareEvent>,
}

impl DatasetBundle {
    pub fn new(load: TimeSeries, covariates: BTreeMap<Covariate, TimeSeries>) -> Result<Self> {
        for (cov, s) in &covariates {
            if s.start != load.start || s.step_seconds != load.step_seconds || s.len() != load.len()
            {
                return Err(DataError::Bundle(format!(
                    "covariate {} does not share the load grid",
                    cov.id()
                )));
            }
        }
        Ok(Self {
            calendar_origin: load.start,
            load,
            covariates,
            events: Vec::new(),
        })
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.load.start
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.load.end()
    }

    pub fn len(&self) -> usize {
        self.load.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load.is_empty()
    }

    pub fn covariate(&self, c: Covariate) -> Option<&TimeSeries> {
        self.covariates.get(&c)
    }

    /// Restricts every member series to `[start, end)`.
    pub fn slice(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<DatasetBundle> {
        let load = self.load.slice(start, end)?;
        let covariates = self
            .covariates
            .iter()
            .map(|(c, s)| Ok((*c, s.slice(start, end)?)))
            .collect::<Result<_>>()?;
        Ok(DatasetBundle {
            calendar_origin: self.calendar_origin,
            load,
            covariates,
            events: self
                .events
                .iter()
                .filter(|e| e.end > start && e.start < end)
                .copied()
                .collect(),
        })
    }
}
