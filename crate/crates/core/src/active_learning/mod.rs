//! Uncertainty-sampling active learning: query selection `Q = {t | sigma_t > theta}`,
//! acquisition of actuals, weighted augmentation with warm-start
//! retraining, and the operator-owned threshold.
//!
//! State transitions are functional: [`run_cycle`] takes the current
//! [`ALState`] by reference and returns a new one, so a failed cycle leaves
//! the caller's state untouched.

mod cycle;
mod flags;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

pub use cycle::{
    acquire_actuals, augment_and_retrain, run_cycle, ALCycleReport, ALState, Acquisition,
    CycleConfig, Repository, RetrainSpec, StoreRepository, TrainingSet, WindowRef,
};
pub use flags::{flag_rare_event, FlagOutcome, RareEventFlag};

use crate::evaluation::EvalError;
use crate::forecaster::{ForecastError, ForecastRecord};
use crate::metrics::MetricsError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ALError {
    #[error("{0}")]
    Domain(String),
    #[error("repository: {0}")]
    Repository(String),
    #[error("no new complete windows could be built from the acquired points")]
    NothingToLearn,
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, ALError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetBy {
    Operator,
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChange {
    pub at: DateTime<Utc>,
    pub theta: f64,
    pub rationale: String,
    pub actor: String,
    pub set_by: SetBy,
}

/// Active threshold (data units of sigma) plus its append-only audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub theta: f64,
    pub set_by: SetBy,
    pub history: Vec<ThresholdChange>,
}

impl ThresholdPolicy {
    pub fn with_default(theta: f64, at: DateTime<Utc>) -> Result<Self> {
        check_theta(theta)?;
        Ok(Self {
            theta,
            set_by: SetBy::Default,
            history: vec![ThresholdChange {
                at,
                theta,
                rationale: "default".into(),
                actor: "system".into(),
                set_by: SetBy::Default,
            }],
        })
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("at,theta,set_by,actor,rationale\n");
        for h in &self.history {
            let set_by = match h.set_by {
                SetBy::Operator => "operator",
                SetBy::Default => "default",
            };
            let _ = writeln!(
                out,
                "{},{:?},{},{},{}",
                h.at.to_rfc3339(),
                h.theta,
                set_by,
                csv_field(&h.actor),
                csv_field(&h.rationale)
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(ALError::Domain(format!(
            "threshold must be positive, got {theta}"
        )))
    }
}

/// Operator change of the threshold. Repeated values are recorded again.
pub fn update_threshold(
    policy: &ThresholdPolicy,
    theta: f64,
    rationale: &str,
    actor: &str,
    at: DateTime<Utc>,
) -> Result<ThresholdPolicy> {
    check_theta(theta)?;
    let mut next = policy.clone();
    next.theta = theta;
    next.set_by = SetBy::Operator;
    next.history.push(ThresholdChange {
        at,
        theta,
        rationale: rationale.to_string(),
        actor: actor.to_string(),
        set_by: SetBy::Operator,
    });
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub timestamp: DateTime<Utc>,
    pub sigma: f64,
    /// Start of the forecast window the step belongs to.
    pub day: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    /// Sorted by timestamp, unique.
    pub points: Vec<QueryPoint>,
    pub theta_used: f64,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn timestamps(&self) -> Vec<DateTime<Utc>> {
        self.points.iter().map(|p| p.timestamp).collect()
    }

    /// Distinct forecast days, sorted.
    pub fn days(&self) -> Vec<DateTime<Utc>> {
        let set: BTreeSet<_> = self.points.iter().map(|p| p.day).collect();
        set.into_iter().collect()
    }
}

/// Per-timestamp sigma over an archive. A timestamp forecast more than once
/// keeps its largest sigma (first record wins ties).
fn step_sigmas(
    archive: &[ForecastRecord],
) -> std::collections::BTreeMap<DateTime<Utc>, (f64, DateTime<Utc>)> {
    let mut by_time = std::collections::BTreeMap::new();
    for r in archive {
        for s in &r.steps {
            by_time
                .entry(s.timestamp)
                .and_modify(|e: &mut (f64, DateTime<Utc>)| {
                    if s.sigma > e.0 {
                        *e = (s.sigma, r.target_start);
                    }
                })
                .or_insert((s.sigma, r.target_start));
        }
    }
    by_time
}

/// Steps with `sigma > theta` (strict), skipping timestamps in `exclude`
/// (hours already covered by training targets).
pub fn select_queries(
    archive: &[ForecastRecord],
    theta: f64,
    exclude: &BTreeSet<DateTime<Utc>>,
) -> QuerySet {
    let points = step_sigmas(archive)
        .into_iter()
        .filter(|(t, (sigma, _))| *sigma > theta && !exclude.contains(t))
        .map(|(timestamp, (sigma, day))| QueryPoint {
            timestamp,
            sigma,
            day,
        })
        .collect();
    QuerySet {
        points,
        theta_used: theta,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub queried_points: usize,
    pub queried_days: usize,
}

/// Query counts for several thresholds over one archive.
pub fn theta_sweep(
    archive: &[ForecastRecord],
    thetas: &[f64],
    exclude: &BTreeSet<DateTime<Utc>>,
) -> Result<Vec<SweepRow>> {
    thetas
        .iter()
        .map(|&theta| {
            check_theta(theta)?;
            let q = select_queries(archive, theta, exclude);
            Ok(SweepRow {
                theta,
                queried_points: q.len(),
                queried_days: q.days().len(),
            })
        })
        .collect()
}

/// The `quantile` of per-step sigma over the archive (linear interpolation
/// between order statistics). A starting point for the operator, never
/// applied automatically.
pub fn suggest_theta(archive: &[ForecastRecord], quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(ALError::Domain(format!(
            "quantile must lie in (0, 1), got {quantile}"
        )));
    }
    let mut s: Vec<f64> = step_sigmas(archive).values().map(|v| v.0).collect();
    if s.is_empty() {
        return Err(ALError::Domain("empty forecast archive".into()));
    }
    s.sort_by(f64::total_cmp);
    let pos = quantile * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

/// Every hour in `[start, start + horizon)` for each start.
pub fn covered_hours(
    starts: impl IntoIterator<Item = DateTime<Utc>>,
    horizon: usize,
) -> BTreeSet<DateTime<Utc>> {
    starts
        .into_iter()
        .flat_map(|s| (0..horizon as i64).map(move |h| s + TimeDelta::hours(h)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::ForecastStep;

    fn t0() -> DateTime<Utc> {
        "2023-03-01T00:00:00Z".parse().unwrap()
    }

    fn record(start: DateTime<Utc>, sigmas: &[f64]) -> ForecastRecord {
        ForecastRecord {
            model_id: "m".into(),
            issue_time: start,
            target_start: start,
            level: 0.95,
            steps: sigmas
                .iter()
                .enumerate()
                .map(|(i, &s)| ForecastStep {
                    timestamp: start + TimeDelta::hours(i as i64),
                    mu: 0.0,
                    sigma: s,
                    lower: -2.0 * s,
                    upper: 2.0 * s,
                })
                .collect(),
        }
    }

    #[test]
    fn strict_threshold_examples() {
        let a = [record(t0(), &[0.5, 1.2, 0.9])];
        let none = BTreeSet::new();
        let q = select_queries(&a, 1.0, &none);
        assert_eq!(q.timestamps(), vec![t0() + TimeDelta::hours(1)]);
        assert!(select_queries(&a, 1.2, &none).is_empty());
        assert!(select_queries(&a, 5.0, &none).is_empty());
        assert_eq!(select_queries(&a, 1e-9, &none).len(), 3);
    }

    #[test]
    fn training_hours_excluded() {
        let a = [record(t0(), &[2.0, 2.0])];
        let ex = covered_hours([t0()], 1);
        assert_eq!(
            select_queries(&a, 1.0, &ex).timestamps(),
            vec![t0() + TimeDelta::hours(1)]
        );
    }

    #[test]
    fn threshold_updates_append() {
        let p = ThresholdPolicy::with_default(1000.0, t0()).unwrap();
        let p2 = update_threshold(&p, 800.0, "too many queries", "op", t0()).unwrap();
        assert_eq!(
            (p2.history.len(), p2.theta, p2.set_by),
            (2, 800.0, SetBy::Operator)
        );
        assert_eq!(p2.history[1].rationale, "too many queries");
        assert!(matches!(
            update_threshold(&p2, 0.0, "", "op", t0()),
            Err(ALError::Domain(_))
        ));
        let p3 = update_threshold(&p2, 800.0, "again", "op", t0()).unwrap();
        assert_eq!(p3.history.len(), 3);
        assert!(p3.history_csv().lines().count() == 4);
    }

    #[test]
    fn sweep_and_suggestion() {
        let a = [record(t0(), &[1.0, 2.0, 3.0, 4.0, 5.0])];
        let rows = theta_sweep(&a, &[0.5, 2.5, 9.0], &BTreeSet::new()).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.queried_points).collect::<Vec<_>>(),
            vec![5, 3, 0]
        );
        assert_eq!(suggest_theta(&a, 0.5).unwrap(), 3.0);
        assert_eq!(suggest_theta(&a, 0.9).unwrap(), 4.6);
    }
}
