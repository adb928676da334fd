#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use daycast_service::{serve_on, AppState, Engine, EngineOptions, FixedClock, JobStatus};
use serde_json::Value;

pub const NOW: &str = "2023-02-01T00:00:00Z";

/// Small enough that a train job finishes in well under a second.
pub const TINY_TRAIN: &str = r#"{
  "hyperparams": {"history_horizon": 48, "lstm_hidden": 4, "fc_hidden": 4, "max_epochs": 2, "stride_hours": 24, "seed": 7},
  "holdout_days": 7,
  "pool_days": 7
}"#;

pub struct Server {
    pub base: String,
    pub state: AppState,
    pub clock: Arc<FixedClock>,
    pub client: reqwest::Client,
    pub dir: PathBuf,
    handle: tokio::task::JoinHandle<()>,
}

impl Drop for Server {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

pub fn now() -> DateTime<Utc> {
    NOW.parse().unwrap()
}

pub async fn start(dir: &Path) -> Server {
    start_at(dir, now()).await
}

pub async fn start_at(dir: &Path, at: DateTime<Utc>) -> Server {
    let clock = Arc::new(FixedClock::new(at));
    let engine = Arc::new(Engine::open(dir, clock.clone(), EngineOptions::default()).unwrap());
    let state = AppState::new(engine).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let handle = tokio::spawn({
        let state = state.clone();
        async move {
            serve_on(listener, state).await.unwrap();
        }
    });
    Server {
        base,
        state,
        clock,
        client: reqwest::Client::new(),
        dir: dir.to_path_buf(),
        handle,
    }
}

impl Server {
    pub async fn get(&self, path: &str) -> (u16, String) {
        let r = self
            .client
            .get(format!("{}{path}", self.base))
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.text().await.unwrap())
    }

    pub async fn post(&self, path: &str, body: &str) -> (u16, String) {
        self.post_keyed(path, body, None).await
    }

    pub async fn post_keyed(&self, path: &str, body: &str, key: Option<&str>) -> (u16, String) {
        let mut req = self
            .client
            .post(format!("{}{path}", self.base))
            .body(body.to_string());
        if let Some(k) = key {
            req = req.header("Idempotency-Key", k);
        }
        let r = req.send().await.unwrap();
        (r.status().as_u16(), r.text().await.unwrap())
    }

    /// Polls a job until it reaches a terminal state.
    pub async fn wait_job(&self, id: &str, limit: Duration) -> JobStatus {
        let t = Instant::now();
        loop {
            let (code, body) = self.get(&format!("/v1/jobs/{id}")).await;
            assert_eq!(code, 200, "{body}");
            let v: Value = serde_json::from_str(&body).unwrap();
            let job: JobStatus = serde_json::from_value(v["data"].clone()).unwrap();
            if matches!(
                job.state,
                daycast_service::JobState::Done | daycast_service::JobState::Failed
            ) {
                return job;
            }
            assert!(
                t.elapsed() < limit,
                "job {id} still {:?} after {limit:?}",
                job.state
            );
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// POSTs a job-starting request and waits for the job to finish.
    pub async fn run_job(&self, path: &str, body: &str, limit: Duration) -> JobStatus {
        let (code, text) = self.post(path, body).await;
        assert_eq!(code, 202, "{text}");
        let id = data(&text)["id"].as_str().unwrap().to_string();
        self.wait_job(&id, limit).await
    }

    /// Synthetic data, a tiny trained model, and nothing else.
    pub async fn tiny_setup(&self) -> String {
        let (code, body) = self.post("/v1/synth", r#"{"n_days": 40, "seed": 3}"#).await;
        assert_eq!(code, 200, "{body}");
        let job = self
            .run_job("/v1/train", TINY_TRAIN, Duration::from_secs(60))
            .await;
        assert!(job.error.is_none(), "{:?}", job.error);
        job.result.unwrap()
    }
}

pub fn data(body: &str) -> Value {
    let v: Value = serde_json::from_str(body).unwrap_or_else(|e| panic!("{e}: {body}"));
    v["data"].clone()
}

pub fn error_code(body: &str) -> String {
    let v: Value = serde_json::from_str(body).unwrap_or_else(|e| panic!("{e}: {body}"));
    assert_eq!(v["status"], "error", "{body}");
    assert!(v.get("data").is_none(), "{body}");
    v["error"]["code"].as_str().unwrap().to_string()
}

/// Compares against `tests/golden/<name>`; `UPDATE_GOLDEN=1` rewrites it.
pub fn assert_golden(name: &str, body: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, body).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()));
    assert!(want == body, "{name} differs from golden file:\n{body}");
}

async fn stable_get(s: &Server, path: &str) -> String {
    let (code, a) = s.get(path).await;
    assert_eq!(code, 200, "{a}");
    let (_, b) = s.get(path).await;
    assert!(a == b, "{path} is not byte-stable");
    a
}

/// Drives a small pipeline over HTTP and checks each endpoint's payload
/// against its golden file.
pub async fn golden_scenario(s: &Server) {
    s.tiny_setup().await;

    let (code, body) = s
        .post(
            "/v1/events",
            r#"{"start": "2022-12-10T00:00:00Z", "end": "2022-12-11T00:00:00Z", "note": "substation outage", "actor": "op-1"}"#,
        )
        .await;
    assert_eq!(code, 200, "{body}");
    assert_golden("post_events.json", &body);

    let (code, body) = s.post("/v1/al/cycle", r#"{"retrain_epochs": 1}"#).await;
    assert_eq!(code, 202, "{body}");
    assert_golden("post_al_cycle.json", &body);
    let job = s
        .wait_job(data(&body)["id"].as_str().unwrap(), Duration::from_secs(60))
        .await;
    assert_eq!(job.result.as_deref(), Some("cycle-1"), "{:?}", job.error);

    assert_golden("get_al_cycle.json", &stable_get(s, "/v1/al/cycles/1").await);
    assert_golden(
        "get_metrics_comparison.json",
        &stable_get(s, "/v1/metrics/comparison?cycle=1").await,
    );
    assert_golden(
        "get_forecast.json",
        &stable_get(s, "/v1/forecast?date=2022-12-28&level=0.9").await,
    );
    assert_golden(
        "get_forecast.csv",
        &stable_get(s, "/v1/forecast?date=2022-12-28&format=csv").await,
    );
    assert_golden(
        "get_uncertainty_flags.json",
        &stable_get(s, "/v1/uncertainty-flags?from=2022-12-08&to=2022-12-30").await,
    );

    let (code, body) = s
        .post(
            "/v1/threshold",
            r#"{"theta": 1000.0, "rationale": "back to the site default", "actor": "op-1"}"#,
        )
        .await;
    assert_eq!(code, 200, "{body}");
    assert_golden("post_threshold.json", &body);
}
