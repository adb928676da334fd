mod common;

use std::time::Duration;

use common::{data, start};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let paths = [
        "/v1/health",
        "/v1/threshold",
        "/v1/events",
        "/v1/dataset",
        "/v1/models",
        "/v1/jobs/job-000001",
        "/v1/jobs/job-000002",
        "/v1/al/cycles/1",
        "/v1/forecast?date=2022-12-29",
        "/v1/uncertainty-flags?from=2022-12-01&to=2022-12-30",
    ];
    let before = {
        let s = start(dir.path()).await;
        s.tiny_setup().await;
        s.post(
            "/v1/events",
            r#"{"start": "2022-12-26T00:00:00Z", "end": "2022-12-27T00:00:00Z", "actor": "op"}"#,
        )
        .await;
        let job = s
            .run_job(
                "/v1/al/cycle",
                r#"{"retrain_epochs": 1}"#,
                Duration::from_secs(60),
            )
            .await;
        assert!(job.error.is_none());
        s.post(
            "/v1/threshold",
            r#"{"theta": 1234.5, "rationale": "after cycle", "actor": "op"}"#,
        )
        .await;
        let mut out = Vec::new();
        for p in paths {
            let (code, body) = s.get(p).await;
            assert_eq!(code, 200, "{p}: {body}");
            out.push(body);
        }
        out
    };
    let s = start(dir.path()).await;
    for (p, want) in paths.iter().zip(before) {
        assert_eq!(s.get(p).await.1, want, "{p}");
    }
    assert_eq!(data(&s.get("/v1/threshold").await.1)["theta"], 1234.5);
    // job numbering continues
    let job = s
        .run_job(
            "/v1/al/cycle",
            r#"{"retrain_epochs": 1}"#,
            Duration::from_secs(60),
        )
        .await;
    assert_eq!(job.id, "job-000003");
}
