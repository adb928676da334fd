//! JSON/CSV HTTP API under `/v1`. Every response, error or not, is an
//! [`ApiEnvelope`]; `?format=csv` swaps the envelope for a flat table where
//! one exists.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use chrono::{DateTime, NaiveDate, Utc};
use daycast_core::datastore::SyntheticConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{CycleRequest, Engine, TrainRequest};
use crate::error::{Result, ServiceError};
use crate::jobs::{JobKind, Jobs};
use crate::payload::{ApiEnvelope, CsvTable, HealthDoc};

const IDEMPOTENCY_KIND: &str = "idempotency";

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub jobs: Arc<Jobs>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Result<Self> {
        let jobs = Arc::new(Jobs::new(engine.clone())?);
        Ok(Self { engine, jobs })
    }
}

/// A finished response: status, content type and body bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Reply {
    status: u16,
    content_type: String,
    body: Vec<u8>,
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (
            status,
            [(header::CONTENT_TYPE, self.content_type)],
            self.body,
        )
            .into_response()
    }
}

fn envelope<T: Serialize>(status: u16, env: &ApiEnvelope<T>) -> Reply {
    let mut body = serde_json::to_vec_pretty(env).expect("payloads serialize");
    body.push(b'\n');
    Reply {
        status,
        content_type: "application/json".into(),
        body,
    }
}

fn fail(e: &ServiceError) -> Reply {
    envelope::<()>(e.http_status(), &ApiEnvelope::err(e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

fn reply<T: Serialize + CsvTable>(status: u16, format: Format, r: Result<T>) -> Reply {
    match r {
        Ok(v) if format == Format::Csv => Reply {
            status,
            content_type: "text/csv".into(),
            body: v.to_csv().into_bytes(),
        },
        Ok(v) => envelope(status, &ApiEnvelope::ok(v)),
        Err(e) => fail(&e),
    }
}

fn json_only<T: Serialize>(status: u16, r: Result<T>) -> Reply {
    match r {
        Ok(v) => envelope(status, &ApiEnvelope::ok(v)),
        Err(e) => fail(&e),
    }
}

fn parse_query<T: DeserializeOwned>(raw: &Option<String>) -> Result<T> {
    serde_urlencoded::from_str(raw.as_deref().unwrap_or(""))
        .map_err(|e| ServiceError::Validation(format!("query: {e}")))
}

/// An empty body means "all defaults".
fn parse_body<T: DeserializeOwned + Default>(body: &[u8]) -> Result<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::Validation(format!("body: {e}")))
}

fn parse_format(f: Option<&str>) -> Result<Format> {
    match f {
        None | Some("json") => Ok(Format::Json),
        Some("csv") => Ok(Format::Csv),
        Some(other) => Err(ServiceError::Validation(format!(
            "unknown format '{other}', expected json or csv"
        ))),
    }
}

/// Runs engine work off the async executor.
async fn blocking<F>(f: F) -> Reply
where
    F: FnOnce() -> Reply + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| fail(&ServiceError::Internal(format!("worker panicked: {e}"))))
}

#[derive(Serialize, Deserialize)]
struct StoredReply {
    request: String,
    reply: Reply,
}

/// Replays the stored reply for a repeated `Idempotency-Key`. A reused key
/// with a different request is a conflict. Only successful replies are
/// stored, so a failed request can be retried under the same key.
async fn idempotent<F>(
    state: &AppState,
    headers: &HeaderMap,
    route: &str,
    body: &[u8],
    f: F,
) -> Reply
where
    F: FnOnce() -> Reply + Send + 'static,
{
    let Some(key) = headers.get("idempotency-key").and_then(|v| v.to_str().ok()) else {
        return blocking(f).await;
    };
    let doc = hex::encode(Sha256::digest(key.as_bytes()));
    let mut h = Sha256::new();
    h.update(route.as_bytes());
    h.update([0]);
    h.update(body);
    let request = hex::encode(h.finalize());
    let engine = state.engine.clone();
    let lookup = {
        let (engine, doc) = (engine.clone(), doc.clone());
        tokio::task::spawn_blocking(move || engine.store().get_document(IDEMPOTENCY_KIND, &doc))
            .await
    };
    if let Ok(Ok(Some(bytes))) = lookup {
        if let Ok(stored) = serde_json::from_slice::<StoredReply>(&bytes) {
            if stored.request != request {
                return fail(&ServiceError::Conflict(
                    "idempotency key reused with a different request".into(),
                ));
            }
            return stored.reply;
        }
    }
    let out = blocking(f).await;
    if (200..300).contains(&out.status) {
        let stored = StoredReply {
            request,
            reply: out.clone(),
        };
        let bytes = serde_json::to_vec(&stored).expect("reply serializes");
        let _ = tokio::task::spawn_blocking(move || {
            if let Err(e) = engine.store().put_document(IDEMPOTENCY_KIND, &doc, &bytes) {
                log::warn!("could not store idempotent reply: {e}");
            }
        })
        .await;
    }
    out
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/synth", post(synth))
        .route("/v1/ingest", post(ingest))
        .route("/v1/dataset", get(dataset))
        .route("/v1/train", post(train))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/models", get(models))
        .route("/v1/models/{id}", get(model))
        .route("/v1/forecast", get(forecast))
        .route("/v1/uncertainty-flags", get(uncertainty_flags))
        .route("/v1/threshold", get(threshold).post(set_threshold))
        .route("/v1/al/cycle", post(al_cycle))
        .route("/v1/al/cycles/{n}", get(al_cycle_report))
        .route("/v1/al/sweep", get(al_sweep))
        .route("/v1/metrics", get(metrics))
        .route("/v1/metrics/comparison", get(comparison))
        .route("/v1/bench", get(bench))
        .route("/v1/events", get(events).post(flag_event))
        .fallback(|| async { fail(&ServiceError::NotFound("route".into())) })
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Deserialize, Default)]
struct FormatQuery {
    format: Option<String>,
}

async fn health(State(s): State<AppState>) -> Reply {
    let e = &s.engine;
    json_only(
        200,
        Ok(HealthDoc {
            service: "daycast".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            active_model: e.active_model_id(),
            cycles_run: e.cycles_run(),
            training_windows: e.training_size().0,
            validation_windows: e.training_size().1,
            running_job: s.jobs.running(),
        }),
    )
}

async fn synth(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    let engine = s.engine.clone();
    let b = body.clone();
    idempotent(&s, &headers, "synth", &body, move || {
        json_only(
            200,
            parse_body::<SyntheticConfig>(&b).and_then(|cfg| engine.synth(cfg)),
        )
    })
    .await
}

#[derive(Deserialize)]
struct IngestQuery {
    schema: String,
}

async fn ingest(
    State(s): State<AppState>,
    headers: HeaderMap,
    RawQuery(q): RawQuery,
    body: Bytes,
) -> Reply {
    let engine = s.engine.clone();
    let b = body.clone();
    let route = format!("ingest?{}", q.as_deref().unwrap_or(""));
    idempotent(&s, &headers, &route, &body, move || {
        json_only(
            200,
            parse_query::<IngestQuery>(&q).and_then(|iq| engine.ingest(&b, &iq.schema)),
        )
    })
    .await
}

async fn dataset(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        match parse_query::<FormatQuery>(&q).and_then(|f| parse_format(f.format.as_deref())) {
            Ok(fmt) => reply(200, fmt, s.engine.dataset()),
            Err(e) => fail(&e),
        }
    })
    .await
}

async fn train(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    let state = s.clone();
    let b = body.clone();
    idempotent(&s, &headers, "train", &body, move || {
        let start = || {
            let req: TrainRequest = parse_body(&b)?;
            state.engine.check_train(&req)?;
            let epochs = req.hyperparams.max_epochs;
            let engine = state.engine.clone();
            state.jobs.start(JobKind::Train, epochs, move |hook| {
                engine.train(&req, Some(hook)).map(|m| m.id)
            })
        };
        json_only(202, start())
    })
    .await
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> Reply {
    json_only(200, s.jobs.get(&id))
}

async fn models(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        match parse_query::<FormatQuery>(&q).and_then(|f| parse_format(f.format.as_deref())) {
            Ok(fmt) => reply(200, fmt, s.engine.models()),
            Err(e) => fail(&e),
        }
    })
    .await
}

async fn model(State(s): State<AppState>, Path(id): Path<String>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        match parse_query::<FormatQuery>(&q).and_then(|f| parse_format(f.format.as_deref())) {
            Ok(fmt) => reply(200, fmt, s.engine.model_info(&id)),
            Err(e) => fail(&e),
        }
    })
    .await
}

fn default_level() -> f64 {
    0.95
}

#[derive(Deserialize)]
struct ForecastQuery {
    date: NaiveDate,
    #[serde(default = "default_level")]
    level: f64,
    format: Option<String>,
}

async fn forecast(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        let run = || {
            let fq: ForecastQuery = parse_query(&q)?;
            let fmt = parse_format(fq.format.as_deref())?;
            Ok((fmt, s.engine.forecast(fq.date, fq.level)))
        };
        match run() {
            Ok((fmt, r)) => reply(200, fmt, r),
            Err(e) => fail(&e),
        }
    })
    .await
}

#[derive(Deserialize)]
struct RangeQuery {
    from: NaiveDate,
    to: NaiveDate,
    format: Option<String>,
}

async fn uncertainty_flags(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        let run = || {
            let rq: RangeQuery = parse_query(&q)?;
            let fmt = parse_format(rq.format.as_deref())?;
            Ok((fmt, s.engine.uncertainty_flags(rq.from, rq.to)))
        };
        match run() {
            Ok((fmt, r)) => reply(200, fmt, r),
            Err(e) => fail(&e),
        }
    })
    .await
}

async fn threshold(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    match parse_query::<FormatQuery>(&q).and_then(|f| parse_format(f.format.as_deref())) {
        Ok(fmt) => reply(200, fmt, Ok(s.engine.threshold())),
        Err(e) => fail(&e),
    }
}

#[derive(Deserialize, Default)]
struct ThresholdBody {
    theta: f64,
    #[serde(default)]
    rationale: String,
    #[serde(default)]
    actor: String,
}

async fn set_threshold(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    let engine = s.engine.clone();
    let b = body.clone();
    idempotent(&s, &headers, "threshold", &body, move || {
        let r = serde_json::from_slice::<ThresholdBody>(&b)
            .map_err(|e| ServiceError::Validation(format!("body: {e}")))
            .and_then(|t| engine.set_threshold(t.theta, &t.rationale, &t.actor));
        json_only(200, r)
    })
    .await
}

async fn al_cycle(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    let state = s.clone();
    let b = body.clone();
    idempotent(&s, &headers, "al/cycle", &body, move || {
        let start = || {
            let req: CycleRequest = parse_body(&b)?;
            let epochs = state.engine.check_cycle(&req)?;
            let engine = state.engine.clone();
            state.jobs.start(JobKind::AlCycle, epochs, move |hook| {
                engine
                    .run_cycle(&req, Some(hook))
                    .map(|r| format!("cycle-{}", r.cycle))
            })
        };
        json_only(202, start())
    })
    .await
}

async fn al_cycle_report(
    State(s): State<AppState>,
    Path(n): Path<String>,
    RawQuery(q): RawQuery,
) -> Reply {
    blocking(move || {
        let run = || {
            let fmt = parse_format(parse_query::<FormatQuery>(&q)?.format.as_deref())?;
            let n: usize = n
                .parse()
                .map_err(|_| ServiceError::Validation(format!("bad cycle number '{n}'")))?;
            Ok((fmt, s.engine.cycle_report(n)))
        };
        match run() {
            Ok((fmt, r)) => reply(200, fmt, r),
            Err(e) => fail(&e),
        }
    })
    .await
}

#[derive(Deserialize)]
struct SweepQuery {
    thetas: String,
    format: Option<String>,
}

async fn al_sweep(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        let run = || {
            let sq: SweepQuery = parse_query(&q)?;
            let fmt = parse_format(sq.format.as_deref())?;
            let thetas = parse_thetas(&sq.thetas)?;
            Ok((fmt, s.engine.sweep(&thetas)))
        };
        match run() {
            Ok((fmt, r)) => reply(200, fmt, r),
            Err(e) => fail(&e),
        }
    })
    .await
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_thetas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| ServiceError::Validation(format!("bad threshold '{t}'")))
        })
        .collect()
}

#[derive(Deserialize)]
struct MetricsQuery {
    model: Option<String>,
    start: Option<DateTime<Utc>>,
    end: Option<DateTime<Utc>>,
    #[serde(default = "default_level")]
    level: f64,
    format: Option<String>,
}

async fn metrics(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        let run = || {
            let mq: MetricsQuery = parse_query(&q)?;
            let fmt = parse_format(mq.format.as_deref())?;
            Ok((
                fmt,
                s.engine
                    .metrics(mq.model.as_deref(), mq.start, mq.end, mq.level),
            ))
        };
        match run() {
            Ok((fmt, r)) => reply(200, fmt, r),
            Err(e) => fail(&e),
        }
    })
    .await
}

#[derive(Deserialize)]
struct CompareQuery {
    cycle: Option<usize>,
    a: Option<String>,
    b: Option<String>,
    #[serde(default = "default_level")]
    level: f64,
    format: Option<String>,
}

async fn comparison(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        let run = || {
            let cq: CompareQuery = parse_query(&q)?;
            let fmt = parse_format(cq.format.as_deref())?;
            let r = match (cq.cycle, cq.a, cq.b) {
                (Some(n), None, None) => s.engine.compare_cycle(n),
                (None, Some(a), Some(b)) => s.engine.compare_models(&a, &b, cq.level),
                _ => Err(ServiceError::Validation(
                    "give either cycle or both a and b".into(),
                )),
            };
            Ok((fmt, r))
        };
        match run() {
            Ok((fmt, r)) => reply(200, fmt, r),
            Err(e) => fail(&e),
        }
    })
    .await
}

#[derive(Deserialize)]
struct BenchQuery {
    /// Comma-separated subset of rnn, seasonal, ar, arima, sarima.
    models: Option<String>,
    start: Option<DateTime<Utc>>,
    end: Option<DateTime<Utc>>,
    #[serde(default = "default_level")]
    level: f64,
    format: Option<String>,
}

async fn bench(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    blocking(move || {
        let run = || {
            let bq: BenchQuery = parse_query(&q)?;
            let fmt = parse_format(bq.format.as_deref())?;
            let models = split_list(bq.models.as_deref().unwrap_or(""));
            Ok((fmt, s.engine.bench(&models, bq.start, bq.end, bq.level)))
        };
        match run() {
            Ok((fmt, r)) => reply(200, fmt, r),
            Err(e) => fail(&e),
        }
    })
    .await
}

async fn events(State(s): State<AppState>, RawQuery(q): RawQuery) -> Reply {
    match parse_query::<FormatQuery>(&q).and_then(|f| parse_format(f.format.as_deref())) {
        Ok(fmt) => reply(200, fmt, Ok(s.engine.events())),
        Err(e) => fail(&e),
    }
}

#[derive(Deserialize)]
struct EventBody {
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    #[serde(default)]
    note: String,
    #[serde(default)]
    actor: String,
}

async fn flag_event(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    let engine = s.engine.clone();
    let b = body.clone();
    idempotent(&s, &headers, "events", &body, move || {
        let r = serde_json::from_slice::<EventBody>(&b)
            .map_err(|e| ServiceError::Validation(format!("body: {e}")))
            .and_then(|ev| engine.flag_event(ev.start, ev.end, &ev.note, &ev.actor));
        json_only(200, r)
    })
    .await
}
