//! Stateful layer over the core crate: one dataset, one active model, the
//! threshold policy and operator flags, all persisted in the store so a
//! restart picks up where the last process stopped.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, TimeDelta, Utc};
use daycast_core::active_learning::{
    self as al, ALCycleReport, ALState, CycleConfig, FlagOutcome, RareEventFlag, Repository, SetBy,
    StoreRepository, ThresholdChange, ThresholdPolicy, TrainingSet,
};
use daycast_core::datastore::{
    generate_synthetic, Covariate, CsvSchema, DataError, DatasetBundle, Store, SyntheticConfig,
    TimeSeries,
};
use daycast_core::evaluation::{self, day_starts, ArSpec};
use daycast_core::exec::Execution;
use daycast_core::forecaster::{
    self, decode_model, encode_model, make_windows, EpochHook, FeatureFrame, ForecastError,
    ForecastRecord, Hyperparams, SplitSpec, TrainOptions, TrainedModel,
};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Result, ServiceError};
use crate::payload::{
    DatasetDoc, EventDoc, FlaggedDay, FlagsDoc, ForecastDoc, ForecastStepDoc, IngestDoc,
    MetricsRow, MetricsTable, ModelDoc, PolicyDoc, SweepDoc,
};

pub const BUNDLE: &str = "current";
/// Threshold in force before any model exists, in MW of sigma.
pub const DEFAULT_THETA: f64 = 1000.0;
/// Level of the stored forecast archive; other levels are derived from it.
pub const ARCHIVE_LEVEL: f64 = 0.95;
pub const SUGGESTION_QUANTILE: f64 = 0.9;
/// Longest range accepted by the flag listing.
pub const MAX_FLAG_RANGE_DAYS: i64 = 366;

const STATE_KIND: &str = "engine";
const STATE_KEY: &str = "state";
const MODELS_KIND: &str = "models";
const REPORTS_KIND: &str = "reports";
const FORECASTS_KIND: &str = "forecasts";

/// Day boundaries of the current split: training before `train_end`, the
/// query pool up to `eval_start`, the held-out span up to `eval_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub train_end: DateTime<Utc>,
    pub eval_start: DateTime<Utc>,
    pub eval_end: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EngineState {
    active_model: Option<String>,
    training: TrainingSet,
    layout: Option<Layout>,
    policy: ThresholdPolicy,
    flags: Vec<RareEventFlag>,
    cycles_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRequest {
    pub hyperparams: Hyperparams,
    /// Held-out evaluation days at the end of the data.
    pub holdout_days: usize,
    /// Days before the held-out span screened by active learning. Zero
    /// trains on everything before the held-out span, and rules out cycles.
    pub pool_days: usize,
    pub validation_fraction: f64,
}

impl Default for TrainRequest {
    fn default() -> Self {
        Self {
            hyperparams: Hyperparams::default(),
            holdout_days: 21,
            pool_days: 21,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleRequest {
    pub sample_weight: f64,
    pub retrain_epochs: Option<usize>,
    pub full_retrain: bool,
}

impl Default for CycleRequest {
    fn default() -> Self {
        Self {
            sample_weight: 2.0,
            retrain_epochs: None,
            full_retrain: false,
        }
    }
}

/// Testing hook: make the next cycle fail at a chosen point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Archiving the pool forecasts fails.
    StoreForecasts,
    /// Everything is computed, then the commit fails.
    Commit,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EngineOptions {
    pub execution: Execution,
    /// Replaces every seed (synthetic data and training) when set.
    pub seed_override: Option<u64>,
}

pub struct Engine {
    store: Store,
    clock: Arc<dyn Clock>,
    opts: EngineOptions,
    state: RwLock<EngineState>,
    write: Mutex<()>,
    models: Mutex<HashMap<String, Arc<TrainedModel>>>,
    bundle: Mutex<Option<Arc<DatasetBundle>>>,
    fault: Mutex<Option<Fault>>,
}

struct FaultyRepo<'a> {
    inner: StoreRepository<'a>,
    fail_store: bool,
}

impl Repository for FaultyRepo<'_> {
    fn store_forecasts(&self, records: &[ForecastRecord]) -> al::Result<()> {
        if self.fail_store {
            return Err(al::ALError::Repository("injected store failure".into()));
        }
        self.inner.store_forecasts(records)
    }

    fn actual(&self, t: DateTime<Utc>) -> al::Result<Option<f64>> {
        self.inner.actual(t)
    }
}

fn json_err(e: serde_json::Error) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

fn day_start(d: NaiveDate) -> DateTime<Utc> {
    d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc()
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(ServiceError::Validation(format!(
            "level must lie in (0, 1), got {level}"
        )))
    }
}

impl Engine {
    pub fn open(dir: impl AsRef<Path>, clock: Arc<dyn Clock>, opts: EngineOptions) -> Result<Self> {
        let store = Store::open(dir)?;
        let state = match store.get_document(STATE_KIND, STATE_KEY)? {
            Some(bytes) => serde_json::from_slice(&bytes).map_err(json_err)?,
            None => {
                let s = EngineState {
                    active_model: None,
                    training: TrainingSet::default(),
                    layout: None,
                    policy: ThresholdPolicy::with_default(DEFAULT_THETA, clock.now())?,
                    flags: Vec::new(),
                    cycles_run: 0,
                };
                let bytes = serde_json::to_vec(&s).map_err(json_err)?;
                store.put_document(STATE_KIND, STATE_KEY, &bytes)?;
                s
            }
        };
        Ok(Self {
            store,
            clock,
            opts,
            state: RwLock::new(state),
            write: Mutex::new(()),
            models: Mutex::new(HashMap::new()),
            bundle: Mutex::new(None),
            fault: Mutex::new(None),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn inject_fault(&self, fault: Option<Fault>) {
        *self.fault.lock() = fault;
    }

    fn take_fault(&self, which: Fault) -> bool {
        let mut f = self.fault.lock();
        if *f == Some(which) {
            *f = None;
            true
        } else {
            false
        }
    }

    fn persist(&self, s: &EngineState) -> Result<()> {
        let bytes = serde_json::to_vec(s).map_err(json_err)?;
        self.store.put_document(STATE_KIND, STATE_KEY, &bytes)?;
        Ok(())
    }

    /// Applies `f` to a copy of the state, persists it, then publishes it.
    fn mutate<T>(&self, f: impl FnOnce(&mut EngineState) -> Result<T>) -> Result<T> {
        let _w = self.write.lock();
        let mut next = self.state.read().clone();
        let out = f(&mut next)?;
        self.persist(&next)?;
        *self.state.write() = next;
        Ok(out)
    }

    // ---- data ----

    pub fn bundle(&self) -> Result<Arc<DatasetBundle>> {
        let mut cache = self.bundle.lock();
        if let Some(b) = cache.as_ref() {
            return Ok(b.clone());
        }
        let b = match self.store.load_bundle(BUNDLE) {
            Ok(b) => Arc::new(b),
            Err(DataError::NotFound(_)) => {
                return Err(ServiceError::DataUnavailable(
                    "no dataset yet: generate or ingest one first".into(),
                ))
            }
            Err(e) => return Err(e.into()),
        };
        *cache = Some(b.clone());
        Ok(b)
    }

    fn dataset_doc(bundle: &DatasetBundle) -> DatasetDoc {
        let mut series = vec![bundle.load.series_id.clone()];
        series.extend(bundle.covariates.values().map(|s| s.series_id.clone()));
        DatasetDoc {
            bundle: BUNDLE.into(),
            start: bundle.start(),
            end: bundle.end(),
            hours: bundle.len(),
            series,
            events: bundle.events.clone(),
        }
    }

    pub fn dataset(&self) -> Result<DatasetDoc> {
        Ok(Self::dataset_doc(&*self.bundle()?))
    }

    pub fn synth(&self, mut cfg: SyntheticConfig) -> Result<DatasetDoc> {
        if let Some(seed) = self.opts.seed_override {
            cfg.seed = seed;
        }
        let bundle = generate_synthetic(&cfg)?;
        let _w = self.write.lock();
        self.store.save_bundle(BUNDLE, &bundle)?;
        let doc = Self::dataset_doc(&bundle);
        *self.bundle.lock() = Some(Arc::new(bundle));
        Ok(doc)
    }

    /// Ingests CSV described by a `column:series_id:unit,...` schema. When a
    /// `load` series exists afterwards the dataset is (re)assembled from it
    /// and whichever weather covariates are stored.
    pub fn ingest(&self, csv: &[u8], schema: &str) -> Result<IngestDoc> {
        let schema = CsvSchema::from_str(schema)?;
        let _w = self.write.lock();
        let report = self.store.ingest_csv(csv, &schema)?;
        *self.bundle.lock() = None;
        let dataset = if self.store.contains(forecaster::LOAD_FEATURE) {
            let bundle = self.assemble()?;
            self.store.save_bundle(BUNDLE, &bundle)?;
            let doc = Self::dataset_doc(&bundle);
            *self.bundle.lock() = Some(Arc::new(bundle));
            Some(doc)
        } else {
            None
        };
        Ok(IngestDoc {
            series_ids: report.series_ids,
            rows: report.rows,
            stored_points: report.stored_points,
            interpolated: report.interpolated.len(),
            dataset,
        })
    }

    /// Load plus stored covariates, cut to the span they all cover.
    fn assemble(&self) -> Result<DatasetBundle> {
        let load = self.store.series(forecaster::LOAD_FEATURE)?;
        let covs: Vec<(Covariate, TimeSeries)> = Covariate::ALL
            .into_iter()
            .filter(|c| self.store.contains(c.id()))
            .map(|c| Ok((c, self.store.series(c.id())?)))
            .collect::<Result<_>>()?;
        let start = covs
            .iter()
            .map(|(_, s)| s.start)
            .fold(load.start, DateTime::max);
        let end = covs
            .iter()
            .map(|(_, s)| s.end())
            .fold(load.end(), DateTime::min);
        if end <= start {
            return Err(ServiceError::DataUnavailable(
                "load and weather series do not overlap".into(),
            ));
        }
        let covariates = covs
            .into_iter()
            .map(|(c, s)| Ok((c, s.slice(start, end)?)))
            .collect::<Result<_>>()?;
        let mut bundle = DatasetBundle::new(load.slice(start, end)?, covariates)?;
        if let Ok(old) = self.store.load_bundle(BUNDLE) {
            bundle.events = old.events;
        }
        Ok(bundle)
    }

    // ---- models ----

    fn save_model(&self, m: &TrainedModel) -> Result<()> {
        self.store
            .put_document(MODELS_KIND, m.id(), &encode_model(m)?)?;
        Ok(())
    }

    pub fn model(&self, id: &str) -> Result<Arc<TrainedModel>> {
        if let Some(m) = self.models.lock().get(id) {
            return Ok(m.clone());
        }
        let bytes = match self.store.get_document(MODELS_KIND, id) {
            Ok(Some(b)) => b,
            Ok(None) | Err(DataError::InvalidId(_)) => {
                return Err(ServiceError::NotFound(format!("model {id}")))
            }
            Err(e) => return Err(e.into()),
        };
        let m = Arc::new(decode_model(&bytes)?);
        self.models.lock().insert(id.to_string(), m.clone());
        Ok(m)
    }

    fn active(&self) -> Result<(Arc<TrainedModel>, Layout)> {
        let (id, layout) = {
            let s = self.state.read();
            (s.active_model.clone(), s.layout)
        };
        match (id, layout) {
            (Some(id), Some(layout)) => Ok((self.model(&id)?, layout)),
            _ => Err(ServiceError::NoModel),
        }
    }

    pub fn active_model_id(&self) -> Option<String> {
        self.state.read().active_model.clone()
    }

    fn model_doc(&self, m: &TrainedModel) -> ModelDoc {
        let p = &m.provenance;
        ModelDoc {
            id: m.id().to_string(),
            parent: p.parent.clone(),
            active: self.state.read().active_model.as_deref() == Some(m.id()),
            data_start: p.data_start,
            data_end: p.data_end,
            seed: p.seed,
            train_samples: p.train_samples,
            validation_samples: p.validation_samples,
            weighted_samples: p.weighted_samples,
            best_epoch: m.log.best_epoch,
            stopped_early: m.log.stopped_early,
            epochs: m.log.epochs.clone(),
        }
    }

    pub fn model_info(&self, id: &str) -> Result<ModelDoc> {
        Ok(self.model_doc(&*self.model(id)?))
    }

    pub fn models(&self) -> Result<Vec<ModelDoc>> {
        self.store
            .list_documents(MODELS_KIND)?
            .iter()
            .map(|id| self.model_info(id))
            .collect()
    }

    // ---- training ----

    fn layout_for(&self, bundle: &DatasetBundle, req: &TrainRequest) -> Result<Layout> {
        if req.holdout_days == 0 {
            return Err(ServiceError::Validation(
                "holdout_days must be positive".into(),
            ));
        }
        if !(req.validation_fraction > 0.0 && req.validation_fraction < 1.0) {
            return Err(ServiceError::Validation(format!(
                "validation_fraction must lie in (0, 1), got {}",
                req.validation_fraction
            )));
        }
        let days = (bundle.len() / 24) as i64;
        let eval_end = bundle.start() + TimeDelta::days(days);
        let eval_start = eval_end - TimeDelta::days(req.holdout_days as i64);
        let train_end = eval_start - TimeDelta::days(req.pool_days as i64);
        let need = req.hyperparams.history_horizon as i64 + 2 * 24;
        if (train_end - bundle.start()).num_hours() < need {
            return Err(ServiceError::DataUnavailable(format!(
                "{days} days of data leave too little for training after {} holdout and {} pool days",
                req.holdout_days, req.pool_days
            )));
        }
        Ok(Layout {
            train_end,
            eval_start,
            eval_end,
        })
    }

    fn effective_hp(&self, req: &TrainRequest) -> Hyperparams {
        let mut hp = req.hyperparams.clone();
        if let Some(seed) = self.opts.seed_override {
            hp.seed = seed;
        }
        hp
    }

    /// Cheap checks run before a training job is queued.
    pub fn check_train(&self, req: &TrainRequest) -> Result<()> {
        self.effective_hp(req).validate()?;
        self.layout_for(&*self.bundle()?, req).map(|_| ())
    }

    pub fn train(&self, req: &TrainRequest, on_epoch: Option<EpochHook>) -> Result<ModelDoc> {
        let hp = self.effective_hp(req);
        hp.validate()?;
        let bundle = self.bundle()?;
        let layout = self.layout_for(&bundle, req)?;
        let train_bundle = bundle.slice(bundle.start(), layout.train_end)?;
        let split = SplitSpec::chronological(&train_bundle, &hp, 0, req.validation_fraction);
        let set = make_windows(&train_bundle, &hp, &split)?;
        let opts = TrainOptions {
            execution: self.opts.execution,
            on_epoch,
            ..Default::default()
        };
        let model = Arc::new(forecaster::train_with(
            &set.train,
            &set.validation,
            &set.scaler,
            &hp,
            &opts,
        )?);
        self.save_model(&model)?;
        self.models
            .lock()
            .insert(model.id().to_string(), model.clone());
        let archive = self.refresh_archive(&model, &bundle, layout.train_end)?;
        let training = TrainingSet::from_windows(&set);
        let now = self.now();
        self.mutate(|s| {
            s.active_model = Some(model.id().to_string());
            s.training = training;
            s.layout = Some(layout);
            if s.policy.set_by == SetBy::Default {
                let pool: Vec<ForecastRecord> = archive
                    .iter()
                    .filter(|r| r.target_start < layout.eval_start)
                    .cloned()
                    .collect();
                if let Ok(theta) = al::suggest_theta(&pool, SUGGESTION_QUANTILE) {
                    s.policy.theta = theta;
                    s.policy.history.push(ThresholdChange {
                        at: now,
                        theta,
                        rationale: format!(
                            "{}th percentile of pool sigma for {}",
                            (SUGGESTION_QUANTILE * 100.0).round(),
                            model.id()
                        ),
                        actor: "system".into(),
                        set_by: SetBy::Default,
                    });
                }
            }
            Ok(())
        })?;
        Ok(self.model_doc(&model))
    }

    /// Forecasts every complete day from `from` to the end of the data and
    /// archives the records.
    fn refresh_archive(
        &self,
        model: &TrainedModel,
        bundle: &DatasetBundle,
        from: DateTime<Utc>,
    ) -> Result<Vec<ForecastRecord>> {
        let records = self.forecast_days(model, bundle, from, bundle.end())?;
        StoreRepository::new(&self.store, &bundle.load.series_id).store_forecasts(&records)?;
        Ok(records)
    }

    fn forecast_days(
        &self,
        model: &TrainedModel,
        bundle: &DatasetBundle,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Result<Vec<ForecastRecord>> {
        let starts = day_starts(bundle, from, to, model.hyperparams.forecast_horizon);
        let frame = FeatureFrame::new(bundle, &model.scaler, &model.hyperparams)?;
        let contexts = starts
            .iter()
            .map(|&t| frame.context(t))
            .collect::<forecaster::Result<Vec<_>>>()?;
        Ok(forecaster::predict_contexts(
            model,
            &contexts,
            ARCHIVE_LEVEL,
            self.opts.execution,
        )?)
    }

    fn archived(&self, model_id: &str, t: DateTime<Utc>) -> Result<Option<ForecastRecord>> {
        let key = format!("{model_id}_{}", t.format("%Y%m%dT%H"));
        match self.store.get_document(FORECASTS_KIND, &key)? {
            Some(bytes) => Ok(Some(serde_json::from_slice(&bytes).map_err(json_err)?)),
            None => Ok(None),
        }
    }

    // ---- forecasts and flags ----

    pub fn forecast(&self, date: NaiveDate, level: f64) -> Result<ForecastDoc> {
        check_level(level)?;
        let (model, _) = self.active()?;
        let bundle = self.bundle()?;
        let t = day_start(date);
        let record =
            match self.archived(model.id(), t)? {
                Some(r) => r,
                None => forecaster::predict_day_ahead(&model, &bundle, t, ARCHIVE_LEVEL).map_err(
                    |e| match e {
                        ForecastError::InsufficientData(m) => ServiceError::DataUnavailable(m),
                        ForecastError::Data(DataError::Alignment(m)) => {
                            ServiceError::DataUnavailable(m)
                        }
                        e => e.into(),
                    },
                )?,
            };
        let record = record.with_level(level)?;
        let now = self.now();
        let theta = self.state.read().policy.theta;
        let actual = |ts: DateTime<Utc>| {
            if ts >= now {
                return None;
            }
            let i = usize::try_from(bundle.load.grid_offset(ts).ok()?).ok()?;
            bundle.load.values.get(i).copied()
        };
        let max_sigma = record.max_sigma();
        Ok(ForecastDoc {
            date,
            model_id: record.model_id.clone(),
            level,
            unit: bundle.load.unit.clone(),
            theta,
            max_sigma,
            flagged: max_sigma > theta,
            steps: record
                .steps
                .iter()
                .map(|s| ForecastStepDoc {
                    timestamp: s.timestamp,
                    mu: s.mu,
                    sigma: s.sigma,
                    lower: s.lower,
                    upper: s.upper,
                    actual: actual(s.timestamp),
                })
                .collect(),
        })
    }

    /// Days of `[from, to]` (inclusive) whose archived max sigma exceeds the
    /// threshold or that an operator flag touches.
    pub fn uncertainty_flags(&self, from: NaiveDate, to: NaiveDate) -> Result<FlagsDoc> {
        if to < from {
            return Err(ServiceError::Validation(format!(
                "reversed range {from} .. {to}"
            )));
        }
        if (to - from).num_days() >= MAX_FLAG_RANGE_DAYS {
            return Err(ServiceError::Validation(format!(
                "range longer than {MAX_FLAG_RANGE_DAYS} days"
            )));
        }
        let (model_id, theta, flags) = {
            let s = self.state.read();
            (s.active_model.clone(), s.policy.theta, s.flags.clone())
        };
        let mut days = Vec::new();
        for date in from.iter_days().take_while(|d| *d <= to) {
            let t = day_start(date);
            let max_sigma = match &model_id {
                Some(id) => self.archived(id, t)?.map(|r| r.max_sigma()),
                None => None,
            };
            let end = t + TimeDelta::days(1);
            let events: Vec<String> = flags
                .iter()
                .filter(|f| f.start < end && t < f.end)
                .map(|f| f.id.clone())
                .collect();
            let uncertain = max_sigma.is_some_and(|s| s > theta);
            if uncertain || !events.is_empty() {
                days.push(FlaggedDay {
                    date,
                    max_sigma,
                    theta,
                    uncertain,
                    operator_flagged: !events.is_empty(),
                    events,
                });
            }
        }
        Ok(FlagsDoc {
            from,
            to,
            model_id,
            theta,
            days,
        })
    }

    pub fn threshold(&self) -> PolicyDoc {
        PolicyDoc::from(&self.state.read().policy)
    }

    pub fn set_threshold(&self, theta: f64, rationale: &str, actor: &str) -> Result<PolicyDoc> {
        if rationale.trim().is_empty() || actor.trim().is_empty() {
            return Err(ServiceError::Validation(
                "a threshold change needs an actor and a rationale".into(),
            ));
        }
        let now = self.now();
        self.mutate(|s| {
            s.policy = al::update_threshold(&s.policy, theta, rationale, actor, now)?;
            Ok(PolicyDoc::from(&s.policy))
        })
    }

    pub fn events(&self) -> Vec<RareEventFlag> {
        self.state.read().flags.clone()
    }

    pub fn flag_event(
        &self,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
        note: &str,
        actor: &str,
    ) -> Result<EventDoc> {
        if actor.trim().is_empty() {
            return Err(ServiceError::Validation("actor is required".into()));
        }
        let bundle = self.bundle()?;
        let now = self.now();
        let span = (bundle.start(), bundle.end().min(now));
        self.mutate(|s| {
            Ok(
                match al::flag_rare_event(&s.flags, start, end, note, actor, span, now)? {
                    FlagOutcome::Added(f) => {
                        s.flags.push(f.clone());
                        EventDoc {
                            id: f.id.clone(),
                            outcome: "added".into(),
                            flag: f,
                        }
                    }
                    FlagOutcome::AlreadyFlagged(f) => EventDoc {
                        id: f.id.clone(),
                        outcome: "already-flagged".into(),
                        flag: f,
                    },
                },
            )
        })
    }

    // ---- active learning ----

    /// Validates a cycle request; returns the number of epochs it will train.
    pub fn check_cycle(&self, req: &CycleRequest) -> Result<usize> {
        if !(req.sample_weight > 0.0 && req.sample_weight.is_finite()) {
            return Err(ServiceError::Validation(format!(
                "sample_weight must be positive, got {}",
                req.sample_weight
            )));
        }
        if req.retrain_epochs == Some(0) {
            return Err(ServiceError::Validation(
                "retrain_epochs must be positive".into(),
            ));
        }
        let (model, layout) = self.active()?;
        if layout.train_end >= layout.eval_start {
            return Err(ServiceError::Validation(
                "the active model was trained without a query pool".into(),
            ));
        }
        let hp = &model.hyperparams;
        Ok(if req.full_retrain {
            hp.max_epochs
        } else {
            req.retrain_epochs.unwrap_or((hp.max_epochs / 2).max(1))
        })
    }

    /// Runs one cycle on a snapshot of the state. Nothing becomes visible
    /// unless the whole cycle succeeds; threshold changes and flags added
    /// while it ran are kept.
    pub fn run_cycle(
        &self,
        req: &CycleRequest,
        on_epoch: Option<EpochHook>,
    ) -> Result<ALCycleReport> {
        self.check_cycle(req)?;
        let snapshot = self.state.read().clone();
        let (model, layout) = self.active()?;
        let bundle = self.bundle()?;
        let state = ALState {
            model: model.clone(),
            training: snapshot.training.clone(),
            policy: snapshot.policy.clone(),
            flags: snapshot.flags.clone(),
            cycles_run: snapshot.cycles_run,
        };
        let mut cfg = CycleConfig::new(
            (layout.train_end, layout.eval_start),
            (layout.eval_start, layout.eval_end),
        );
        cfg.now = self.now();
        cfg.level = ARCHIVE_LEVEL;
        cfg.sample_weight = req.sample_weight;
        cfg.retrain_epochs = req.retrain_epochs;
        cfg.full_retrain = req.full_retrain;
        cfg.suggestion_quantile = SUGGESTION_QUANTILE;
        cfg.execution = self.opts.execution;
        cfg.on_epoch = on_epoch;
        let started = self.now();
        let repo = FaultyRepo {
            inner: StoreRepository::new(&self.store, &bundle.load.series_id),
            fail_store: self.take_fault(Fault::StoreForecasts),
        };
        let (next, mut report) = al::run_cycle(&state, &bundle, &cfg, &repo)?;
        if !Arc::ptr_eq(&next.model, &model) {
            self.save_model(&next.model)?;
            self.models
                .lock()
                .insert(next.model.id().to_string(), next.model.clone());
            self.refresh_archive(&next.model, &bundle, layout.train_end)?;
        }
        report.wall_seconds = (self.now() - started).num_milliseconds() as f64 / 1000.0;

        let _w = self.write.lock();
        if self.take_fault(Fault::Commit) {
            return Err(ServiceError::Internal("injected commit failure".into()));
        }
        let mut merged = self.state.read().clone();
        if merged.active_model != snapshot.active_model || merged.cycles_run != snapshot.cycles_run
        {
            return Err(ServiceError::Conflict(
                "the active model changed while the cycle ran".into(),
            ));
        }
        merged.active_model = Some(next.model.id().to_string());
        merged.training = next.training;
        merged.cycles_run = report.cycle;
        for f in &mut merged.flags {
            if let Some(done) = next.flags.iter().find(|n| n.id == f.id) {
                f.consumed_in_cycle = done.consumed_in_cycle;
            }
        }
        let key = format!("cycle-{:06}", report.cycle);
        self.store.put_document(
            REPORTS_KIND,
            &format!("{key}.json"),
            &serde_json::to_vec(&report).map_err(json_err)?,
        )?;
        self.store.put_document(
            REPORTS_KIND,
            &format!("{key}.txt"),
            report.to_document().as_bytes(),
        )?;
        self.persist(&merged)?;
        *self.state.write() = merged;
        Ok(report)
    }

    pub fn cycle_report(&self, n: usize) -> Result<ALCycleReport> {
        let key = format!("cycle-{n:06}.json");
        let bytes = self
            .store
            .get_document(REPORTS_KIND, &key)?
            .ok_or_else(|| ServiceError::NotFound(format!("cycle {n}")))?;
        serde_json::from_slice(&bytes).map_err(json_err)
    }

    pub fn cycles_run(&self) -> usize {
        self.state.read().cycles_run
    }

    /// Training and validation window counts of the active training set.
    pub fn training_size(&self) -> (usize, usize) {
        let s = self.state.read();
        (s.training.train.len(), s.training.validation.len())
    }

    /// Query counts over the pool for several thresholds.
    pub fn sweep(&self, thetas: &[f64]) -> Result<SweepDoc> {
        if thetas.is_empty() {
            return Err(ServiceError::Validation("no thresholds given".into()));
        }
        let (model, layout) = self.active()?;
        let bundle = self.bundle()?;
        let mut archive = Vec::new();
        for t in day_starts(
            &bundle,
            layout.train_end,
            layout.eval_start,
            model.hyperparams.forecast_horizon,
        ) {
            match self.archived(model.id(), t)? {
                Some(r) => archive.push(r),
                None => archive.extend(self.forecast_days(
                    &model,
                    &bundle,
                    t,
                    t + TimeDelta::days(1),
                )?),
            }
        }
        let exclude: BTreeSet<DateTime<Utc>> = self
            .state
            .read()
            .training
            .covered_hours(model.hyperparams.forecast_horizon);
        Ok(SweepDoc {
            model_id: model.id().to_string(),
            pool_start: layout.train_end,
            pool_end: layout.eval_start,
            rows: al::theta_sweep(&archive, thetas, &exclude)?,
        })
    }

    // ---- metrics ----

    fn span(
        &self,
        start: Option<DateTime<Utc>>,
        end: Option<DateTime<Utc>>,
    ) -> Result<(DateTime<Utc>, DateTime<Utc>)> {
        let layout = self.state.read().layout;
        let (start, end) = match (start, end, layout) {
            (Some(s), Some(e), _) => (s, e),
            (s, e, Some(l)) => (s.unwrap_or(l.eval_start), e.unwrap_or(l.eval_end)),
            _ => return Err(ServiceError::NoModel),
        };
        if end <= start {
            return Err(ServiceError::Validation(format!(
                "reversed range {start} .. {end}"
            )));
        }
        Ok((start, end))
    }

    fn table(
        &self,
        subject: &str,
        span: (DateTime<Utc>, DateTime<Utc>),
        level: f64,
        rows: Vec<MetricsRow>,
    ) -> Result<MetricsTable> {
        Ok(MetricsTable {
            subject: subject.into(),
            span_start: span.0,
            span_end: span.1,
            level,
            unit: self.bundle()?.load.unit.clone(),
            rows,
        })
    }

    fn score(
        &self,
        model: &TrainedModel,
        span: (DateTime<Utc>, DateTime<Utc>),
        level: f64,
    ) -> Result<MetricsRow> {
        let bundle = self.bundle()?;
        let (r, _) =
            evaluation::evaluate_model(model, &bundle, span.0, span.1, level, self.opts.execution)?;
        let frame = FeatureFrame::new(&bundle, &model.scaler, &model.hyperparams)?;
        let windows = day_starts(&bundle, span.0, span.1, model.hyperparams.forecast_horizon)
            .into_iter()
            .map(|t| frame.window(t, 1.0))
            .collect::<forecaster::Result<Vec<_>>>()?;
        let gnll = forecaster::evaluate_gnll(model, &windows, self.opts.execution)?;
        Ok(MetricsRow::new("rnn", Some(model.id()), &r).with_gnll(gnll))
    }

    /// Scores a model (the active one by default) over a span (the held-out
    /// span by default).
    pub fn metrics(
        &self,
        model: Option<&str>,
        start: Option<DateTime<Utc>>,
        end: Option<DateTime<Utc>>,
        level: f64,
    ) -> Result<MetricsTable> {
        check_level(level)?;
        let m = match model {
            Some(id) => self.model(id)?,
            None => self.active()?.0,
        };
        let span = self.span(start, end)?;
        let row = self.score(&m, span, level)?;
        self.table("model", span, level, vec![row])
    }

    /// Before/after metrics of a stored cycle.
    pub fn compare_cycle(&self, n: usize) -> Result<MetricsTable> {
        let r = self.cycle_report(n)?;
        let rows = vec![
            MetricsRow::new("before", Some(&r.parent_model), &r.metrics_before),
            MetricsRow::new("after", Some(&r.child_model), &r.metrics_after),
        ];
        let level = r.metrics_before.level;
        self.table(
            &format!("cycle {n}"),
            (r.eval_start, r.eval_end),
            level,
            rows,
        )
    }

    /// Two models over the same span.
    pub fn compare_models(&self, a: &str, b: &str, level: f64) -> Result<MetricsTable> {
        check_level(level)?;
        let span = self.span(None, None)?;
        let mut rows = Vec::new();
        for (label, id) in [("a", a), ("b", b)] {
            let mut row = self.score(&*self.model(id)?, span, level)?;
            row.label = label.into();
            rows.push(row);
        }
        self.table("models", span, level, rows)
    }

    /// The active model against the baselines on one span. `models` picks
    /// rows from `rnn`, `seasonal`, `arima`, `sarima` (`ar` means both AR
    /// variants); empty means all.
    pub fn bench(
        &self,
        models: &[String],
        start: Option<DateTime<Utc>>,
        end: Option<DateTime<Utc>>,
        level: f64,
    ) -> Result<MetricsTable> {
        check_level(level)?;
        const KNOWN: [&str; 5] = ["rnn", "seasonal", "ar", "arima", "sarima"];
        if let Some(bad) = models.iter().find(|m| !KNOWN.contains(&m.as_str())) {
            return Err(ServiceError::Validation(format!(
                "unknown forecaster '{bad}', expected one of {}",
                KNOWN.join(", ")
            )));
        }
        let want = |m: &str| {
            models.is_empty()
                || models
                    .iter()
                    .any(|x| x == m || (x == "ar" && m.ends_with("arima")))
        };
        let (model, _) = self.active()?;
        let span = self.span(start, end)?;
        let bundle = self.bundle()?;
        let horizon = model.hyperparams.forecast_horizon;
        let mut rows = Vec::new();
        if want("rnn") {
            rows.push(self.score(&model, span, level)?);
        }
        if want("seasonal") {
            let naive =
                evaluation::evaluate_seasonal_naive(&bundle, span.0, span.1, horizon, level)?;
            rows.push(MetricsRow::new("seasonal_naive", None, &naive));
        }
        for (label, spec) in [("arima", ArSpec::ARIMA), ("sarima", ArSpec::SARIMA)] {
            if want(label) {
                let r =
                    evaluation::evaluate_ar(&bundle, spec, span.0, span.0, span.1, horizon, level)?;
                rows.push(MetricsRow::new(label, None, &r));
            }
        }
        self.table("bench", span, level, rows)
    }
}
