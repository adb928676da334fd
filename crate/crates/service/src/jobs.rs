//! Background jobs (training and AL cycles). At most one runs at a time;
//! every transition is persisted so finished jobs survive a restart.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use daycast_core::forecaster::EpochHook;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Result, ServiceError};
use crate::payload::ErrorBody;

const JOBS_KIND: &str = "jobs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    AlCycle,
}

impl JobKind {
    pub fn name(self) -> &'static str {
        match self {
            JobKind::Train => "train",
            JobKind::AlCycle => "al_cycle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: Progress,
    /// Model id for training, cycle id for AL cycles.
    pub result: Option<String>,
    pub error: Option<ErrorBody>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

struct Inner {
    jobs: BTreeMap<String, JobStatus>,
    next: usize,
    running: Option<String>,
}

pub struct Jobs {
    engine: Arc<Engine>,
    inner: Arc<Mutex<Inner>>,
}

impl Jobs {
    pub fn new(engine: Arc<Engine>) -> Result<Self> {
        let mut jobs = BTreeMap::new();
        for key in engine.store().list_documents(JOBS_KIND)? {
            let bytes = engine
                .store()
                .get_document(JOBS_KIND, &key)?
                .unwrap_or_default();
            let mut job: JobStatus = serde_json::from_slice(&bytes)
                .map_err(|e| ServiceError::Internal(e.to_string()))?;
            if !job.state.is_terminal() {
                // the process died while it ran
                job.state = JobState::Failed;
                job.error = Some(ErrorBody {
                    code: "internal".into(),
                    message: "interrupted by a restart".into(),
                });
            }
            jobs.insert(job.id.clone(), job);
        }
        let next = jobs.len() + 1;
        Ok(Self {
            engine,
            inner: Arc::new(Mutex::new(Inner {
                jobs,
                next,
                running: None,
            })),
        })
    }

    pub fn get(&self, id: &str) -> Result<JobStatus> {
        self.inner
            .lock()
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    pub fn running(&self) -> Option<String> {
        self.inner.lock().running.clone()
    }

    /// Queues `work` on a worker thread and returns the queued status.
    /// `work` receives a progress hook and returns the result reference.
    pub fn start<F>(&self, kind: JobKind, epochs: usize, work: F) -> Result<JobStatus>
    where
        F: FnOnce(EpochHook) -> Result<String> + Send + 'static,
    {
        let status = {
            let mut inner = self.inner.lock();
            if let Some(r) = &inner.running {
                let kind = inner
                    .jobs
                    .get(r)
                    .map(|j| j.kind.name())
                    .unwrap_or("background");
                return Err(ServiceError::Busy(kind.to_string()));
            }
            let id = format!("job-{:06}", inner.next);
            inner.next += 1;
            let status = JobStatus {
                id: id.clone(),
                kind,
                state: JobState::Queued,
                progress: Progress { epoch: 0, epochs },
                result: None,
                error: None,
                created_at: self.engine.now(),
                finished_at: None,
            };
            inner.jobs.insert(id.clone(), status.clone());
            inner.running = Some(id);
            status
        };
        self.persist(&status);

        let inner = self.inner.clone();
        let engine = self.engine.clone();
        let id = status.id.clone();
        std::thread::spawn(move || {
            update(&inner, &engine, &id, |j| j.state = JobState::Running);
            let hook = {
                let (inner, id) = (inner.clone(), id.clone());
                EpochHook::new(move |r| {
                    if let Some(j) = inner.lock().jobs.get_mut(&id) {
                        j.progress.epoch = r.epoch;
                    }
                })
            };
            let outcome = work(hook);
            let now = engine.now();
            update(&inner, &engine, &id, |j| {
                match &outcome {
                    Ok(r) => {
                        j.state = JobState::Done;
                        j.result = Some(r.clone());
                    }
                    Err(e) => {
                        log::warn!("job {} failed: {e}", j.id);
                        j.state = JobState::Failed;
                        j.error = Some(ErrorBody {
                            code: e.code().into(),
                            message: e.to_string(),
                        });
                    }
                }
                j.finished_at = Some(now);
            });
        });
        Ok(status)
    }

    fn persist(&self, status: &JobStatus) {
        persist(&self.engine, status);
    }
}

fn persist(engine: &Engine, status: &JobStatus) {
    let bytes = serde_json::to_vec(status).expect("job status serializes");
    if let Err(e) = engine.store().put_document(JOBS_KIND, &status.id, &bytes) {
        log::error!("could not persist {}: {e}", status.id);
    }
}

/// Applies `f` unless the job already reached a terminal state.
fn update(inner: &Mutex<Inner>, engine: &Engine, id: &str, f: impl FnOnce(&mut JobStatus)) {
    let mut g = inner.lock();
    let Some(j) = g.jobs.get_mut(id) else { return };
    if j.state.is_terminal() {
        return;
    }
    f(j);
    // persisted under the lock so a reader never sees a state the disk lacks
    persist(engine, j);
    if j.state.is_terminal() && g.running.as_deref() == Some(id) {
        g.running = None;
    }
}
