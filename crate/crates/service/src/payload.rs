//! Response documents. Every payload is a struct, so serde emits fields in
//! declaration order and one value has exactly one serialization.

use std::fmt::Write as _;

use chrono::{DateTime, NaiveDate, Utc};
use daycast_core::active_learning::{RareEventFlag, SetBy, ThresholdChange, ThresholdPolicy};
use daycast_core::datastore::RareEvent;
use daycast_core::forecaster::EpochRecord;
use daycast_core::metrics::MetricsReport;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const API_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Exactly one of `data` and `error` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEnvelope<T> {
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    pub api_version: String,
}

impl<T> ApiEnvelope<T> {
    pub fn ok(data: T) -> Self {
        Self {
            status: Status::Ok,
            data: Some(data),
            error: None,
            api_version: API_VERSION.into(),
        }
    }

    pub fn err(e: &ServiceError) -> Self {
        Self {
            status: Status::Error,
            data: None,
            error: Some(ErrorBody {
                code: e.code().into(),
                message: e.to_string(),
            }),
            api_version: API_VERSION.into(),
        }
    }
}

/// Flat CSV rendering for plotting.
pub trait CsvTable {
    fn to_csv(&self) -> String;
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDoc {
    pub bundle: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub hours: usize,
    pub series: Vec<String>,
    pub events: Vec<RareEvent>,
}

impl CsvTable for DatasetDoc {
    fn to_csv(&self) -> String {
        let mut out = String::from("bundle,start,end,hours,series\n");
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            self.bundle,
            self.start.to_rfc3339(),
            self.end.to_rfc3339(),
            self.hours,
            self.series.join(";")
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestDoc {
    pub series_ids: Vec<String>,
    pub rows: usize,
    pub stored_points: usize,
    pub interpolated: usize,
    pub dataset: Option<DatasetDoc>,
}

impl CsvTable for IngestDoc {
    fn to_csv(&self) -> String {
        format!(
            "series,rows,stored_points,interpolated\n{},{},{},{}\n",
            self.series_ids.join(";"),
            self.rows,
            self.stored_points,
            self.interpolated
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub id: String,
    pub parent: Option<String>,
    pub active: bool,
    pub data_start: DateTime<Utc>,
    pub data_end: DateTime<Utc>,
    pub seed: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub weighted_samples: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub epochs: Vec<EpochRecord>,
}

impl CsvTable for ModelDoc {
    fn to_csv(&self) -> String {
        let mut out = String::from("model,epoch,train_gnll,validation_gnll\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?}",
                self.id, e.epoch, e.train_gnll, e.validation_gnll
            );
        }
        out
    }
}

impl CsvTable for Vec<ModelDoc> {
    fn to_csv(&self) -> String {
        let mut out = String::from("model,parent,active,train_samples,best_epoch\n");
        for m in self {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.id,
                m.parent.as_deref().unwrap_or(""),
                m.active,
                m.train_samples,
                m.best_epoch
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastStepDoc {
    pub timestamp: DateTime<Utc>,
    pub mu: f64,
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
    /// Observed load, when already known.
    pub actual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDoc {
    pub date: NaiveDate,
    pub model_id: String,
    pub level: f64,
    pub unit: String,
    pub theta: f64,
    pub max_sigma: f64,
    /// `max_sigma > theta`.
    pub flagged: bool,
    pub steps: Vec<ForecastStepDoc>,
}

impl CsvTable for ForecastDoc {
    fn to_csv(&self) -> String {
        let mut out = String::from("timestamp,mu,sigma,lower,upper,actual\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{}",
                s.timestamp.to_rfc3339(),
                s.mu,
                s.sigma,
                s.lower,
                s.upper,
                opt(s.actual)
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedDay {
    pub date: NaiveDate,
    /// Largest sigma of the archived forecast, if one exists.
    pub max_sigma: Option<f64>,
    pub theta: f64,
    pub uncertain: bool,
    pub operator_flagged: bool,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagsDoc {
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub model_id: Option<String>,
    pub theta: f64,
    pub days: Vec<FlaggedDay>,
}

impl CsvTable for FlagsDoc {
    fn to_csv(&self) -> String {
        let mut out = String::from("date,max_sigma,theta,uncertain,operator_flagged,events\n");
        for d in &self.days {
            let _ = writeln!(
                out,
                "{},{},{:?},{},{},{}",
                d.date,
                opt(d.max_sigma),
                d.theta,
                d.uncertain,
                d.operator_flagged,
                d.events.join(";")
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDoc {
    pub theta: f64,
    pub set_by: SetBy,
    pub history: Vec<ThresholdChange>,
}

impl From<&ThresholdPolicy> for PolicyDoc {
    fn from(p: &ThresholdPolicy) -> Self {
        Self {
            theta: p.theta,
            set_by: p.set_by,
            history: p.history.clone(),
        }
    }
}

impl CsvTable for PolicyDoc {
    fn to_csv(&self) -> String {
        ThresholdPolicy {
            theta: self.theta,
            set_by: self.set_by,
            history: self.history.clone(),
        }
        .history_csv()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDoc {
    pub id: String,
    /// `added` or `already-flagged`.
    pub outcome: String,
    pub flag: RareEventFlag,
}

impl CsvTable for EventDoc {
    fn to_csv(&self) -> String {
        format!(
            "id,outcome,start,end,actor,note\n{},{},{},{},{},{}\n",
            self.id,
            self.outcome,
            self.flag.start.to_rfc3339(),
            self.flag.end.to_rfc3339(),
            field(&self.flag.actor),
            field(&self.flag.note)
        )
    }
}

impl CsvTable for Vec<RareEventFlag> {
    fn to_csv(&self) -> String {
        let mut out = String::from("id,start,end,actor,consumed_in_cycle,note\n");
        for f in self {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                f.id,
                f.start.to_rfc3339(),
                f.end.to_rfc3339(),
                field(&f.actor),
                f.consumed_in_cycle
                    .map(|c| c.to_string())
                    .unwrap_or_default(),
                field(&f.note)
            );
        }
        out
    }
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub model_id: Option<String>,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub sharpness: f64,
    pub picp: f64,
    pub pinball: Option<f64>,
    /// Mean GNLL in scaled units; forecaster rows only.
    pub gnll: Option<f64>,
    pub sample_count: usize,
}

impl MetricsRow {
    pub fn new(label: &str, model_id: Option<&str>, r: &MetricsReport) -> Self {
        Self {
            label: label.into(),
            model_id: model_id.map(str::to_string),
            mse: r.mse,
            rmse: r.rmse,
            mae: r.mae,
            sharpness: r.sharpness,
            picp: r.picp,
            pinball: r.pinball,
            gnll: None,
            sample_count: r.sample_count,
        }
    }

    pub fn with_gnll(mut self, gnll: f64) -> Self {
        self.gnll = Some(gnll);
        self
    }
}

/// Side-by-side metrics over one span (before/after a cycle, or a
/// benchmark of several forecasters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub subject: String,
    pub span_start: DateTime<Utc>,
    pub span_end: DateTime<Utc>,
    pub level: f64,
    pub unit: String,
    pub rows: Vec<MetricsRow>,
}

impl CsvTable for MetricsTable {
    fn to_csv(&self) -> String {
        let mut out =
            String::from("label,model,mse,rmse,mae,sharpness,picp,pinball,gnll,samples\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?},{},{},{}",
                r.label,
                r.model_id.as_deref().unwrap_or(""),
                r.mse,
                r.rmse,
                r.mae,
                r.sharpness,
                r.picp,
                opt(r.pinball),
                opt(r.gnll),
                r.sample_count
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDoc {
    pub model_id: String,
    pub pool_start: DateTime<Utc>,
    pub pool_end: DateTime<Utc>,
    pub rows: Vec<daycast_core::active_learning::SweepRow>,
}

impl CsvTable for SweepDoc {
    fn to_csv(&self) -> String {
        let mut out = String::from("theta,queried_points,queried_days\n");
        for r in &self.rows {
            let _ = writeln!(out, "{:?},{},{}", r.theta, r.queried_points, r.queried_days);
        }
        out
    }
}

impl CsvTable for daycast_core::active_learning::ALCycleReport {
    fn to_csv(&self) -> String {
        let mut out = String::from("phase,");
        out.push_str(&MetricsReport::csv_header());
        out.push('\n');
        let _ = writeln!(out, "before,{}", self.metrics_before.to_csv_row());
        let _ = writeln!(out, "after,{}", self.metrics_after.to_csv_row());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthDoc {
    pub service: String,
    pub version: String,
    pub active_model: Option<String>,
    pub cycles_run: usize,
    pub training_windows: usize,
    pub validation_windows: usize,
    pub running_job: Option<String>,
}
