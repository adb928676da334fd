use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use super::{
    covered_hours, select_queries, suggest_theta, ALError, QuerySet, RareEventFlag, Result,
    ThresholdPolicy,
};
use crate::datastore::{DataError, DatasetBundle, Store};
use crate::evaluation::{day_starts, evaluate_model};
use crate::exec::Execution;
use crate::forecaster::{
    self, EpochHook, FeatureFrame, ForecastError, ForecastRecord, TrainOptions, TrainedModel,
    WindowSample, WindowSet,
};
use crate::metrics::MetricsReport;

/// Where forecasts are archived and actuals are read from.
pub trait Repository: Sync {
    fn store_forecasts(&self, records: &[ForecastRecord]) -> Result<()>;
    /// `Ok(None)` when no actual is stored for `t`.
    fn actual(&self, t: DateTime<Utc>) -> Result<Option<f64>>;
}

pub struct StoreRepository<'a> {
    pub store: &'a Store,
    pub series_id: String,
}

impl<'a> StoreRepository<'a> {
    pub fn new(store: &'a Store, series_id: &str) -> Self {
        Self {
            store,
            series_id: series_id.to_string(),
        }
    }

    pub fn forecast_key(record: &ForecastRecord) -> String {
        format!(
            "{}_{}",
            record.model_id,
            record.target_start.format("%Y%m%dT%H")
        )
    }
}

fn repo_err(e: DataError) -> ALError {
    ALError::Repository(e.to_string())
}

impl Repository for StoreRepository<'_> {
    fn store_forecasts(&self, records: &[ForecastRecord]) -> Result<()> {
        for r in records {
            let bytes = serde_json::to_vec(r).map_err(|e| ALError::Repository(e.to_string()))?;
            self.store
                .put_document("forecasts", &Self::forecast_key(r), &bytes)
                .map_err(repo_err)?;
        }
        Ok(())
    }

    fn actual(&self, t: DateTime<Utc>) -> Result<Option<f64>> {
        match self
            .store
            .query_range(&self.series_id, t, t + TimeDelta::hours(1))
        {
            Ok(s) => Ok(s.values.first().copied()),
            Err(DataError::Alignment(_)) => Ok(None),
            Err(e) => Err(repo_err(e)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub labeled: Vec<(DateTime<Utc>, f64)>,
    /// Members of the query set with no stored actual (including any at or
    /// after `now`).
    pub unavailable: Vec<DateTime<Utc>>,
}

pub fn acquire_actuals(
    q: &QuerySet,
    repo: &dyn Repository,
    now: DateTime<Utc>,
) -> Result<Acquisition> {
    let mut out = Acquisition {
        labeled: Vec::new(),
        unavailable: Vec::new(),
    };
    for p in &q.points {
        if p.timestamp >= now {
            out.unavailable.push(p.timestamp);
            continue;
        }
        match repo.actual(p.timestamp)? {
            Some(v) => out.labeled.push((p.timestamp, v)),
            None => out.unavailable.push(p.timestamp),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowRef {
    pub target_start: DateTime<Utc>,
    pub weight: f64,
}

/// The windows a model was trained and validated on, by target start.
/// Windows are rebuilt from the bundle on demand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub train: Vec<WindowRef>,
    pub validation: Vec<DateTime<Utc>>,
}

impl TrainingSet {
    pub fn from_windows(set: &WindowSet) -> Self {
        Self {
            train: set
                .train
                .iter()
                .map(|w| WindowRef {
                    target_start: w.target_start,
                    weight: w.weight,
                })
                .collect(),
            validation: set.validation.iter().map(|w| w.target_start).collect(),
        }
    }

    pub fn covered_hours(&self, horizon: usize) -> BTreeSet<DateTime<Utc>> {
        covered_hours(
            self.train
                .iter()
                .map(|w| w.target_start)
                .chain(self.validation.iter().copied()),
            horizon,
        )
    }

    pub fn materialize(
        &self,
        bundle: &DatasetBundle,
        model: &TrainedModel,
    ) -> forecaster::Result<(Vec<WindowSample>, Vec<WindowSample>)> {
        let frame = FeatureFrame::new(bundle, &model.scaler, &model.hyperparams)?;
        let train = self
            .train
            .iter()
            .map(|w| frame.window(w.target_start, w.weight))
            .collect::<forecaster::Result<Vec<_>>>()?;
        let val = self
            .validation
            .iter()
            .map(|&t| frame.window(t, 1.0))
            .collect::<forecaster::Result<Vec<_>>>()?;
        Ok((train, val))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainSpec {
    /// Sample weight of the added windows.
    pub weight: f64,
    /// Warm-start epochs; ignored by a full retrain.
    pub epochs: usize,
    pub full_retrain: bool,
    pub execution: Execution,
    pub on_epoch: Option<EpochHook>,
}

impl RetrainSpec {
    pub fn warm(weight: f64, epochs: usize) -> Self {
        Self {
            weight,
            epochs,
            full_retrain: false,
            execution: Execution::default(),
            on_epoch: None,
        }
    }
}

/// Adds one weighted window per new day and retrains from the parent.
/// Returns the child, its training set and the days actually added.
pub fn augment_and_retrain(
    parent: &TrainedModel,
    bundle: &DatasetBundle,
    base: &TrainingSet,
    days: &[DateTime<Utc>],
    spec: &RetrainSpec,
) -> Result<(TrainedModel, TrainingSet, Vec<DateTime<Utc>>)> {
    let weight = spec.weight;
    let existing: BTreeSet<DateTime<Utc>> = base.train.iter().map(|w| w.target_start).collect();
    let unique: BTreeSet<DateTime<Utc>> = days
        .iter()
        .copied()
        .filter(|d| !existing.contains(d))
        .collect();
    let frame = FeatureFrame::new(bundle, &parent.scaler, &parent.hyperparams)?;
    let mut added = Vec::new();
    let mut new_windows = Vec::new();
    for day in unique {
        match frame.window(day, weight) {
            Ok(w) => {
                added.push(day);
                new_windows.push(w);
            }
            Err(ForecastError::InsufficientData(msg)) => log::info!("skipping {day}: {msg}"),
            Err(e) => return Err(e.into()),
        }
    }
    if added.is_empty() {
        return Err(ALError::NothingToLearn);
    }
    let (mut train, validation) = base.materialize(bundle, parent)?;
    train.extend(new_windows);
    let child = if spec.full_retrain {
        let opts = TrainOptions {
            execution: spec.execution,
            on_epoch: spec.on_epoch.clone(),
            ..Default::default()
        };
        let m = forecaster::train_with(
            &train,
            &validation,
            &parent.scaler,
            &parent.hyperparams,
            &opts,
        )?;
        relink(m, parent)?
    } else {
        let mut opts = forecaster::fine_tune_options(parent, spec.epochs, spec.execution);
        opts.on_epoch = spec.on_epoch.clone();
        forecaster::train_with(
            &train,
            &validation,
            &parent.scaler,
            &parent.hyperparams,
            &opts,
        )?
    };
    let mut next = base.clone();
    next.train.extend(added.iter().map(|&d| WindowRef {
        target_start: d,
        weight,
    }));
    Ok((child, next, added))
}

/// Records `parent` on a model trained from scratch.
fn relink(m: TrainedModel, parent: &TrainedModel) -> Result<TrainedModel> {
    let mut prov = m.provenance.clone();
    prov.parent = Some(parent.id().to_string());
    Ok(TrainedModel::new(
        m.hyperparams,
        m.scaler,
        m.dims,
        m.params,
        m.log,
        prov,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    /// Days forecast and screened for queries.
    pub pool_start: DateTime<Utc>,
    pub pool_end: DateTime<Utc>,
    /// Held-out span scored before and after; never trained on.
    pub eval_start: DateTime<Utc>,
    pub eval_end: DateTime<Utc>,
    /// Actuals at or after this instant are unavailable.
    pub now: DateTime<Utc>,
    pub level: f64,
    pub sample_weight: f64,
    /// Defaults to half of the parent's `max_epochs`.
    pub retrain_epochs: Option<usize>,
    pub full_retrain: bool,
    /// Quantile of the child's pool sigma offered as the next threshold.
    pub suggestion_quantile: f64,
    #[serde(skip)]
    pub execution: Execution,
    #[serde(skip)]
    pub on_epoch: Option<EpochHook>,
}

impl CycleConfig {
    pub fn new(pool: (DateTime<Utc>, DateTime<Utc>), eval: (DateTime<Utc>, DateTime<Utc>)) -> Self {
        Self {
            pool_start: pool.0,
            pool_end: pool.1,
            eval_start: eval.0,
            eval_end: eval.1,
            now: pool.1,
            level: 0.95,
            sample_weight: 2.0,
            retrain_epochs: None,
            full_retrain: false,
            suggestion_quantile: 0.9,
            execution: Execution::default(),
            on_epoch: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ALState {
    pub model: Arc<TrainedModel>,
    pub training: TrainingSet,
    pub policy: ThresholdPolicy,
    pub flags: Vec<RareEventFlag>,
    pub cycles_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALCycleReport {
    pub cycle: usize,
    pub theta: f64,
    pub queried: usize,
    pub queried_days: usize,
    pub acquired: usize,
    pub unavailable: Vec<DateTime<Utc>>,
    /// Days added because of operator flags.
    pub forced_days: Vec<DateTime<Utc>>,
    pub added_days: Vec<DateTime<Utc>>,
    /// `retrained`, `no-op` or `nothing-to-learn`.
    pub outcome: String,
    pub metrics_before: MetricsReport,
    pub metrics_after: MetricsReport,
    pub parent_model: String,
    pub child_model: String,
    pub theta_suggestion: Option<f64>,
    pub eval_start: DateTime<Utc>,
    pub eval_end: DateTime<Utc>,
    pub wall_seconds: f64,
}

impl ALCycleReport {
    /// Key-value header followed by a metrics CSV block.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let days = |v: &[DateTime<Utc>]| {
            v.iter()
                .map(|d| d.to_rfc3339())
                .collect::<Vec<_>>()
                .join(";")
        };
        let _ = writeln!(out, "cycle={}", self.cycle);
        let _ = writeln!(out, "theta={:?}", self.theta);
        let _ = writeln!(out, "outcome={}", self.outcome);
        let _ = writeln!(out, "queried={}", self.queried);
        let _ = writeln!(out, "queried_days={}", self.queried_days);
        let _ = writeln!(out, "acquired={}", self.acquired);
        let _ = writeln!(out, "unavailable={}", days(&self.unavailable));
        let _ = writeln!(out, "forced_days={}", days(&self.forced_days));
        let _ = writeln!(out, "added_days={}", days(&self.added_days));
        let _ = writeln!(out, "parent_model={}", self.parent_model);
        let _ = writeln!(out, "child_model={}", self.child_model);
        let _ = writeln!(
            out,
            "theta_suggestion={}",
            self.theta_suggestion
                .map(|t| format!("{t:?}"))
                .unwrap_or_default()
        );
        let _ = writeln!(
            out,
            "eval_span={}/{}",
            self.eval_start.to_rfc3339(),
            self.eval_end.to_rfc3339()
        );
        let _ = writeln!(out, "wall_seconds={:.3}", self.wall_seconds);
        let _ = writeln!(out, "[metrics]");
        let _ = writeln!(out, "phase,{}", MetricsReport::csv_header());
        let _ = writeln!(out, "before,{}", self.metrics_before.to_csv_row());
        let _ = writeln!(out, "after,{}", self.metrics_after.to_csv_row());
        out
    }
}

fn overlaps(a: (DateTime<Utc>, DateTime<Utc>), b: (DateTime<Utc>, DateTime<Utc>)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Candidate days touched by unconsumed flags: day-aligned, before `now`,
/// not already trained on and clear of the evaluation span.
fn flagged_days(
    flags: &[RareEventFlag],
    bundle: &DatasetBundle,
    horizon: usize,
    trained: &BTreeSet<DateTime<Utc>>,
    eval: (DateTime<Utc>, DateTime<Utc>),
    now: DateTime<Utc>,
) -> (Vec<DateTime<Utc>>, Vec<usize>) {
    let h = TimeDelta::hours(horizon as i64);
    let mut days = BTreeSet::new();
    let mut used = Vec::new();
    for (i, f) in flags
        .iter()
        .enumerate()
        .filter(|(_, f)| f.consumed_in_cycle.is_none())
    {
        let mut any = false;
        for d in day_starts(
            bundle,
            f.start - TimeDelta::hours(23),
            f.end + TimeDelta::hours(23),
            horizon,
        ) {
            if overlaps((d, d + h), (f.start, f.end))
                && d + h <= now
                && !trained.contains(&d)
                && !overlaps((d, d + h), eval)
            {
                days.insert(d);
                any = true;
            }
        }
        if any {
            used.push(i);
        }
    }
    (days.into_iter().collect(), used)
}

/// One iteration: predict the pool, archive, select, acquire, augment,
/// retrain and score before/after on the evaluation span. Returns the next
/// state; `state` itself is never modified.
pub fn run_cycle(
    state: &ALState,
    bundle: &DatasetBundle,
    cfg: &CycleConfig,
    repo: &dyn Repository,
) -> Result<(ALState, ALCycleReport)> {
    let started = Instant::now();
    let parent = state.model.clone();
    let hp = &parent.hyperparams;
    let horizon = hp.forecast_horizon;
    let eval = (cfg.eval_start, cfg.eval_end);
    if cfg.eval_end <= cfg.eval_start || cfg.pool_end <= cfg.pool_start {
        return Err(ALError::Domain("empty pool or evaluation span".into()));
    }
    if overlaps((cfg.pool_start, cfg.pool_end), eval) {
        return Err(ALError::Domain("pool and evaluation spans overlap".into()));
    }
    let trained_hours = state.training.covered_hours(horizon);
    if trained_hours
        .range(cfg.eval_start..cfg.eval_end)
        .next()
        .is_some()
    {
        return Err(ALError::Domain(
            "evaluation span overlaps training windows".into(),
        ));
    }

    let metrics_before = evaluate_model(
        &parent,
        bundle,
        cfg.eval_start,
        cfg.eval_end,
        cfg.level,
        cfg.execution,
    )?
    .0;

    let frame = FeatureFrame::new(bundle, &parent.scaler, hp)?;
    let pool_days = day_starts(bundle, cfg.pool_start, cfg.pool_end, horizon);
    let contexts = pool_days
        .iter()
        .map(|&d| frame.context(d))
        .collect::<forecaster::Result<Vec<_>>>()?;
    let archive = forecaster::predict_contexts(&parent, &contexts, cfg.level, cfg.execution)?;
    repo.store_forecasts(&archive)?;

    let q = select_queries(&archive, state.policy.theta, &trained_hours);
    let acq = acquire_actuals(&q, repo, cfg.now)?;
    let labeled: BTreeSet<DateTime<Utc>> = acq.labeled.iter().map(|(t, _)| *t).collect();
    let h = TimeDelta::hours(horizon as i64);
    let mut days: BTreeSet<DateTime<Utc>> = q
        .points
        .iter()
        .filter(|p| labeled.contains(&p.timestamp))
        .map(|p| p.day)
        .filter(|&d| !overlaps((d, d + h), eval))
        .collect();
    let trained_starts: BTreeSet<DateTime<Utc>> = state
        .training
        .train
        .iter()
        .map(|w| w.target_start)
        .collect();
    let (forced, used_flags) = flagged_days(
        &state.flags,
        bundle,
        horizon,
        &trained_starts,
        eval,
        cfg.now,
    );
    days.extend(forced.iter().copied());
    let days: Vec<DateTime<Utc>> = days.into_iter().collect();

    let cycle = state.cycles_run + 1;
    let epochs = cfg.retrain_epochs.unwrap_or((hp.max_epochs / 2).max(1));
    let (child, training, added, outcome) = if days.is_empty() {
        (parent.clone(), state.training.clone(), Vec::new(), "no-op")
    } else {
        let spec = RetrainSpec {
            weight: cfg.sample_weight,
            epochs,
            full_retrain: cfg.full_retrain,
            execution: cfg.execution,
            on_epoch: cfg.on_epoch.clone(),
        };
        match augment_and_retrain(&parent, bundle, &state.training, &days, &spec) {
            Ok((c, t, a)) => (Arc::new(c), t, a, "retrained"),
            Err(ALError::NothingToLearn) => (
                parent.clone(),
                state.training.clone(),
                Vec::new(),
                "nothing-to-learn",
            ),
            Err(e) => return Err(e),
        }
    };

    let (metrics_after, theta_suggestion) = if Arc::ptr_eq(&child, &parent) {
        (
            metrics_before.clone(),
            suggest_theta(&archive, cfg.suggestion_quantile).ok(),
        )
    } else {
        let after = evaluate_model(
            &child,
            bundle,
            cfg.eval_start,
            cfg.eval_end,
            cfg.level,
            cfg.execution,
        )?
        .0;
        let fresh = forecaster::predict_contexts(&child, &contexts, cfg.level, cfg.execution)?;
        (after, suggest_theta(&fresh, cfg.suggestion_quantile).ok())
    };

    let mut flags = state.flags.clone();
    if outcome == "retrained" {
        for i in used_flags {
            flags[i].consumed_in_cycle = Some(cycle);
        }
    }
    let report = ALCycleReport {
        cycle,
        theta: state.policy.theta,
        queried: q.len(),
        queried_days: q.days().len(),
        acquired: acq.labeled.len(),
        unavailable: acq.unavailable,
        forced_days: forced,
        added_days: added,
        outcome: outcome.to_string(),
        metrics_before,
        metrics_after,
        parent_model: parent.id().to_string(),
        child_model: child.id().to_string(),
        theta_suggestion,
        eval_start: cfg.eval_start,
        eval_end: cfg.eval_end,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let next = ALState {
        model: child,
        training,
        policy: state.policy.clone(),
        flags,
        cycles_run: cycle,
    };
    Ok((next, report))
}
