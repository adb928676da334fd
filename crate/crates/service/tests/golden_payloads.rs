mod common;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoint_payloads_match_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let s = common::start(dir.path()).await;
    common::golden_scenario(&s).await;
}
