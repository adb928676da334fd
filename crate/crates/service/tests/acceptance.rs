//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does. Run with
//! `cargo test -p daycast-service --test acceptance -- --nocapture`.

mod common;

use std::collections::BTreeSet;
use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeDelta, Utc};
use daycast_core::active_learning::select_queries;
use daycast_core::autodiff::{finite_diff_check_with, FdOptions};
use daycast_core::datastore::{generate_synthetic, SyntheticConfig};
use daycast_core::exec::Execution;
use daycast_core::forecaster::{
    gnll_loss, make_windows, z_score, ForecastRecord, ForecastStep, Hyperparams, Network, Params,
    ShardMasks, SplitSpec, WindowSample,
};
use daycast_core::metrics::{picp, sharpness, IntervalSet};
use daycast_service::{Fault, JobState};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

use common::{data, start_at, Server};

const SEEDS: [u64; 3] = [1, 2, 3];
/// Acceptance hyperparameters on top of the library defaults.
const HP: &str = r#""stride_hours": 3, "learning_rate": 0.003, "fc_hidden": 128"#;
const TRAIN_LIMIT: Duration = Duration::from_secs(300);
const CYCLE_LIMIT: Duration = Duration::from_secs(180);

fn after_data() -> DateTime<Utc> {
    "2023-04-01T00:00:00Z".parse().unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- oracles ----

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let bundle = generate_synthetic(&SyntheticConfig {
        n_days: 20,
        ..Default::default()
    })
    .unwrap();
    let hp = Hyperparams {
        fc_hidden: 128,
        ..Default::default()
    };
    let set = make_windows(&bundle, &hp, &SplitSpec::train_only(&bundle)).unwrap();
    let batch: Vec<&WindowSample> = set.train.iter().take(2).collect();
    let dims = hp.dims(batch[0].encoder.ncols(), batch[0].decoder.ncols());
    let net = Network::build(dims);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for draw in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let params = Params::init(&dims, &mut rng);
        let masks = ShardMasks::sample(&dims, batch.len(), &mut rng);
        let total = (batch.len() * dims.horizon) as f64;
        let b = net.bind(&params, &batch, masks, true, total);
        let rep = finite_diff_check_with(
            &net.tape,
            &b,
            &FdOptions {
                step: 1e-5,
                max_per_param: Some(12),
                seed: draw,
                execution: Execution::default(),
            },
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(rep.max_error);
        checked += rep.components_checked;
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 60.0,
        format!("max rel err {worst:.2e} over {checked} components, {secs:.1} s"),
    )
}

fn gnll_oracle() -> Outcome {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let cases = [
        (gnll_loss(&[3.0], &[1.0], &[3.0], 1e-6), 0.5 * ln2pi),
        (gnll_loss(&[0.0], &[1.0], &[1.0], 1e-6), 0.5 * ln2pi + 0.5),
        (
            gnll_loss(&[1.0, 2.0], &[1.0, 0.25], &[1.0, 2.0], 1e-6),
            0.5 * (0.5 * ln2pi + 0.5 * (2.0 * std::f64::consts::PI * 0.25).ln()),
        ),
    ];
    let mut worst = 0.0f64;
    for (got, want) in cases {
        worst = worst.max((got.map_err(|e| e.to_string())? - want).abs());
    }
    check(
        worst < 1e-9,
        format!("max abs err {worst:.1e} on 3 examples"),
    )
}

fn interval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=10);
        let (mut y, mut b) = (Vec::new(), Vec::new());
        for _ in 0..n {
            // integer grid so that boundary hits occur
            let lo = rng.random_range(-5i32..5) as f64;
            let hi = lo + rng.random_range(0i32..5) as f64;
            y.push(rng.random_range(-7i32..8) as f64);
            b.push((lo, hi));
        }
        let iv = IntervalSet::new(b.clone(), 0.95).unwrap();
        let mut inside = 0usize;
        let mut width = 0.0;
        for i in 0..n {
            if b[i].0 <= y[i] && y[i] <= b[i].1 {
                inside += 1;
            }
            width += b[i].1 - b[i].0;
        }
        let brute_picp = 100.0 * inside as f64 / n as f64;
        let brute_sharp = width / n as f64;
        if picp(&y, &iv).unwrap() != brute_picp || sharpness(&iv).unwrap() != brute_sharp {
            mismatches += 1;
        }
    }
    let z = z_score(0.95).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut y, mut b) = (Vec::new(), Vec::new());
    for i in 0..10_000 {
        let mu = 50.0 * (i as f64 / 40.0).sin();
        let sigma = 1.0 + (i % 5) as f64;
        y.push(mu + sigma * normal.sample(&mut rng));
        b.push((mu - z * sigma, mu + z * sigma));
    }
    let p = picp(&y, &IntervalSet::new(b, 0.95).unwrap()).unwrap();
    check(
        mismatches == 0 && (93.5..=96.5).contains(&p),
        format!("{mismatches}/100 mismatches, Gaussian PICP {p:.2}"),
    )
}

fn random_archive(rng: &mut ChaCha8Rng) -> Vec<ForecastRecord> {
    let origin: DateTime<Utc> = "2023-02-01T00:00:00Z".parse().unwrap();
    (0..rng.random_range(0..8))
        .map(|k| {
            let start = origin + TimeDelta::days(rng.random_range(0..6));
            ForecastRecord {
                model_id: format!("m{k}"),
                issue_time: start,
                target_start: start,
                level: 0.95,
                steps: (0..24)
                    .map(|h| {
                        let s = rng.random_range(0.0..100.0);
                        ForecastStep {
                            timestamp: start + TimeDelta::hours(h),
                            mu: 0.0,
                            sigma: s,
                            lower: -s,
                            upper: s,
                        }
                    })
                    .collect(),
            }
        })
        .collect()
}

fn query_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut unequal, mut unnested) = (0, 0);
    let none = BTreeSet::new();
    for _ in 0..100 {
        let a = random_archive(&mut rng);
        let theta = rng.random_range(0.0..110.0);
        let mut brute = BTreeSet::new();
        for r in &a {
            for s in &r.steps {
                if s.sigma > theta {
                    brute.insert(s.timestamp);
                }
            }
        }
        let got: BTreeSet<_> = select_queries(&a, theta, &none)
            .timestamps()
            .into_iter()
            .collect();
        if got != brute {
            unequal += 1;
        }
        let mut prev: Option<BTreeSet<_>> = None;
        for t in [0.0, 10.0, 25.0, 50.0, 75.0, 99.0, 150.0] {
            let q: BTreeSet<_> = select_queries(&a, t, &none)
                .timestamps()
                .into_iter()
                .collect();
            if prev.as_ref().is_some_and(|p| !q.is_subset(p)) {
                unnested += 1;
            }
            prev = Some(q);
        }
    }
    check(
        unequal == 0 && unnested == 0,
        format!("{unequal}/100 set mismatches, {unnested} nesting violations"),
    )
}

// ---- service-driven criteria ----

async fn post_ok(s: &Server, path: &str, body: &str) -> Value {
    let (code, text) = s.post(path, body).await;
    assert_eq!(code, 200, "{path}: {text}");
    data(&text)
}

async fn get_ok(s: &Server, path: &str) -> Value {
    let (code, text) = s.get(path).await;
    assert_eq!(code, 200, "{path}: {text}");
    data(&text)
}

/// Starts a training job and returns the model id and its wall time.
async fn train(s: &Server, body: &str) -> (String, f64) {
    let t = Instant::now();
    let job = s.run_job("/v1/train", body, TRAIN_LIMIT).await;
    assert_eq!(job.state, JobState::Done, "{:?}", job.error);
    (job.result.unwrap(), t.elapsed().as_secs_f64())
}

fn row<'a>(table: &'a Value, label: &str) -> &'a Value {
    table["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["label"] == label)
        .unwrap_or_else(|| panic!("no {label} row"))
}

struct LearningRun {
    gnll_drop: f64,
    rnn_mae: f64,
    naive_mae: f64,
    picp: f64,
    secs: f64,
    model_file: Vec<u8>,
    forecast: String,
}

const FORECAST_DAY: &str = "/v1/forecast?date=2023-03-15&level=0.95";

async fn learning_run(seed: u64) -> LearningRun {
    let dir = tempfile::tempdir().unwrap();
    let s = start_at(dir.path(), after_data()).await;
    post_ok(
        &s,
        "/v1/synth",
        &format!(r#"{{"n_days": 120, "seed": {seed}}}"#),
    )
    .await;
    let untrained = format!(
        r#"{{"hyperparams": {{{HP}, "seed": {seed}, "max_epochs": 0}}, "holdout_days": 21, "pool_days": 0}}"#
    );
    let (m0, _) = train(&s, &untrained).await;
    let body = format!(
        r#"{{"hyperparams": {{{HP}, "seed": {seed}}}, "holdout_days": 21, "pool_days": 0}}"#
    );
    let (m1, secs) = train(&s, &body).await;
    let g0 = get_ok(&s, &format!("/v1/metrics?model={m0}")).await["rows"][0]["gnll"]
        .as_f64()
        .unwrap();
    let g1 = get_ok(&s, &format!("/v1/metrics?model={m1}")).await["rows"][0]["gnll"]
        .as_f64()
        .unwrap();
    let bench = get_ok(&s, "/v1/bench?models=rnn,seasonal&level=0.95").await;
    let forecast = s.get(FORECAST_DAY).await.1;
    LearningRun {
        gnll_drop: g0 - g1,
        rnn_mae: row(&bench, "rnn")["mae"].as_f64().unwrap(),
        naive_mae: row(&bench, "seasonal_naive")["mae"].as_f64().unwrap(),
        picp: row(&bench, "rnn")["picp"].as_f64().unwrap(),
        secs,
        model_file: std::fs::read(dir.path().join("docs/models").join(&m1)).unwrap(),
        forecast,
    }
}

async fn learning(runs: Arc<Mutex<Vec<LearningRun>>>) -> Outcome {
    let mut out = Vec::new();
    for seed in SEEDS {
        out.push(learning_run(seed).await);
    }
    let drop = median(out.iter().map(|r| r.gnll_drop).collect());
    let rnn = median(out.iter().map(|r| r.rnn_mae).collect());
    let naive = median(out.iter().map(|r| r.naive_mae).collect());
    let slowest = out.iter().map(|r| r.secs).fold(0.0, f64::max);
    let per_seed: Vec<String> = out
        .iter()
        .map(|r| format!("{:.2}/{:.0}/{:.0}", r.gnll_drop, r.rnn_mae, r.naive_mae))
        .collect();
    *runs.lock() = out;
    check(
        drop >= 1.0 && rnn < naive && slowest < 300.0,
        format!(
            "median GNLL drop {drop:.2} nats, MAE {rnn:.0} vs naive {naive:.0}, slowest {slowest:.0} s (drop/mae/naive per seed {})",
            per_seed.join(", ")
        ),
    )
}

fn calibration(runs: &[LearningRun]) -> Outcome {
    if runs.is_empty() {
        return Err("learning runs unavailable".into());
    }
    let p = median(runs.iter().map(|r| r.picp).collect());
    let each: Vec<String> = runs.iter().map(|r| format!("{:.1}", r.picp)).collect();
    check(
        (90.0..=99.0).contains(&p),
        format!("median held-out PICP {p:.1} (per seed {})", each.join(", ")),
    )
}

async fn determinism(runs: &[LearningRun]) -> Outcome {
    let Some(first) = runs.first() else {
        return Err("learning runs unavailable".into());
    };
    let again = learning_run(SEEDS[0]).await;
    let same_model = again.model_file == first.model_file;
    let same_forecast = again.forecast == first.forecast;
    check(
        same_model && same_forecast,
        format!(
            "model file identical: {same_model} ({} bytes), forecast document identical: {same_forecast}",
            first.model_file.len()
        ),
    )
}

async fn al_setup(seed: u64) -> (tempfile::TempDir, Server, String) {
    let dir = tempfile::tempdir().unwrap();
    let s = start_at(dir.path(), after_data()).await;
    post_ok(
        &s,
        "/v1/synth",
        &format!(r#"{{"n_days": 120, "seed": {seed}}}"#),
    )
    .await;
    let body = format!(
        r#"{{"hyperparams": {{{HP}, "seed": {seed}}}, "holdout_days": 21, "pool_days": 21}}"#
    );
    let (model, _) = train(&s, &body).await;
    (dir, s, model)
}

async fn al_direction() -> Outcome {
    let (mut mse, mut sharp, mut cover) = (Vec::new(), Vec::new(), Vec::new());
    let mut slowest = 0.0f64;
    for seed in SEEDS {
        let (_dir, s, _) = al_setup(seed).await;
        let t = Instant::now();
        let job = s.run_job("/v1/al/cycle", "{}", CYCLE_LIMIT).await;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        assert_eq!(job.state, JobState::Done, "{:?}", job.error);
        let r = get_ok(&s, "/v1/al/cycles/1").await;
        let (b, a) = (&r["metrics_before"], &r["metrics_after"]);
        let f = |v: &Value, k: &str| v[k].as_f64().unwrap();
        mse.push((f(b, "mse"), f(a, "mse")));
        sharp.push((f(b, "sharpness"), f(a, "sharpness")));
        cover.push((f(b, "picp"), f(a, "picp")));
    }
    let med = |v: &[(f64, f64)]| {
        (
            median(v.iter().map(|x| x.0).collect()),
            median(v.iter().map(|x| x.1).collect()),
        )
    };
    let (m0, m1) = med(&mse);
    let (s0, s1) = med(&sharp);
    let (p0, p1) = med(&cover);
    check(
        m1 <= m0 && s1 <= s0 && p1 >= p0 - 1.0 && slowest < 180.0,
        format!(
            "median MSE {m0:.0} -> {m1:.0}, sharpness {s0:.0} -> {s1:.0}, PICP {p0:.1} -> {p1:.1}, slowest cycle {slowest:.0} s"
        ),
    )
}

async fn atomicity() -> Outcome {
    let (_dir, s, model) = al_setup(1).await;
    let snapshot = |h: &Value, t: &Value| {
        (
            h["active_model"].clone(),
            h["training_windows"].clone(),
            h["validation_windows"].clone(),
            t["history"].clone(),
        )
    };
    let before = snapshot(
        &get_ok(&s, "/v1/health").await,
        &get_ok(&s, "/v1/threshold").await,
    );
    s.state.engine.inject_fault(Some(Fault::StoreForecasts));
    let job = s.run_job("/v1/al/cycle", "{}", CYCLE_LIMIT).await;
    let after = snapshot(
        &get_ok(&s, "/v1/health").await,
        &get_ok(&s, "/v1/threshold").await,
    );
    check(
        job.state == JobState::Failed && before == after && before.0 == model.as_str(),
        format!(
            "cycle {:?} ({}), state unchanged: {}",
            job.state,
            job.error.map(|e| e.message).unwrap_or_default(),
            before == after
        ),
    )
}

async fn service_contract() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let s = common::start(dir.path()).await;
    common::golden_scenario(&s).await;
    Ok("synth -> train -> events -> cycle -> report -> comparison -> forecast -> flags -> threshold over HTTP; 8 golden payloads byte-stable".into())
}

// ---- runner ----

async fn run<F>(report: &Mutex<Vec<(String, bool)>>, name: &str, fut: F)
where
    F: Future<Output = Outcome> + Send + 'static,
{
    let t = Instant::now();
    let (ok, detail) = match tokio::spawn(fut).await {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(e) => {
            let msg = match e.try_into_panic() {
                Ok(p) => p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into()),
                Err(e) => e.to_string(),
            };
            (false, format!("panicked: {msg}"))
        }
    };
    let line = format!(
        "{} {name}: {detail} [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    println!("{line}");
    report.lock().push((line, ok));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn acceptance() {
    let report = Mutex::new(Vec::new());
    let r = &report;
    run(r, "gradient check", async { gradient_check() }).await;
    run(r, "gnll oracle", async { gnll_oracle() }).await;
    run(r, "picp/sharpness oracle", async { interval_oracle() }).await;
    run(r, "query selection oracle", async { query_oracle() }).await;

    let runs = Arc::new(Mutex::new(Vec::new()));
    run(r, "learning", learning(runs.clone())).await;
    let learned = Arc::new(std::mem::take(&mut *runs.lock()));
    let l = learned.clone();
    run(r, "calibration", async move { calibration(&l) }).await;
    run(r, "al improvement direction", al_direction()).await;
    run(r, "atomicity", atomicity()).await;
    let l = learned.clone();
    run(r, "determinism", async move { determinism(&l).await }).await;
    run(r, "service contract", service_contract()).await;

    let report = report.into_inner();
    let failed: Vec<&String> = report.iter().filter(|r| !r.1).map(|r| &r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        report.len() - failed.len(),
        report.len()
    );
    assert!(failed.is_empty(), "failing criteria:\n{failed:#?}");
}
