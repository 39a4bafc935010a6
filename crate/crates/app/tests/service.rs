use std::sync::Arc;

use serde_json::{json, Value};
use tokio::sync::oneshot;

use factcheck_app::service::{serve, MetricsSnapshot};
use factcheck_core::corpus::ExplanationRecord;
use factcheck_core::encoder::HashedEncoder;
use factcheck_core::index::{build_index, Threshold};
use factcheck_core::pipeline::{Pipeline, ScoreFnVerifier, Verdict};

fn kb(n: usize) -> Vec<ExplanationRecord> {
    (0..n)
        .map(|i| ExplanationRecord {
            id: format!("exp-{i:06}"),
            text: format!("explanation {i} about topic{} and detail{}", i % 37, i % 101),
            date: None,
            source: None,
        })
        .collect()
}

fn pipeline(n: usize) -> Arc<Pipeline> {
    let kb = kb(n);
    let encoder = Arc::new(HashedEncoder::new(32, 0).unwrap());
    let index = build_index(&kb, encoder.as_ref()).unwrap();
    let threshold = Threshold::from_similarities(&[0.2, 0.4]).unwrap();
    // Deterministic per-pair score so responses can be checked for mixing.
    let verifier = ScoreFnVerifier(|claim: &str, expl: &str| ((claim.len() * 31 + expl.len()) % 100) as f64 / 100.0);
    Arc::new(Pipeline::new(encoder, index, &kb, threshold, Arc::new(verifier), 0.5).unwrap())
}

struct Server {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

async fn start(p: Arc<Pipeline>) -> Server {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel();
    let handle = tokio::spawn(serve(listener, p, async {
        let _ = rx.await;
    }));
    Server {
        base,
        stop: Some(tx),
        handle,
    }
}

impl Server {
    async fn shutdown(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.await.unwrap().unwrap();
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_reports_index() {
    let server = start(pipeline(5500)).await;
    let resp = reqwest::get(format!("{}/health", server.base)).await.unwrap();
    assert_eq!(resp.status(), 200);
    let v: Value = resp.json().await.unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["index_size"], 5500);
    assert_eq!(v["encoder"], "hashed:v1:dim=32:seed=0");
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn check_returns_verdict_json() {
    let p = pipeline(200);
    let server = start(p.clone()).await;
    let client = reqwest::Client::new();
    let claim = "explanation 7 about topic7 and detail7";
    let resp = client
        .post(format!("{}/check", server.base))
        .json(&json!({ "claim": claim }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let got: Verdict = resp.json().await.unwrap();
    let want = p.check_claim(claim).unwrap();
    assert_eq!(got.without_timings(), want.without_timings());
    assert_eq!(got.candidates[0].id, "exp-000007");
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bad_requests_get_400() {
    let server = start(pipeline(50)).await;
    let client = reqwest::Client::new();
    let url = format!("{}/check", server.base);

    let resp = client.post(&url).json(&json!({"claim": ""})).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    let v: Value = resp.json().await.unwrap();
    assert_eq!(v, json!({"error": "empty claim"}));

    let resp = client.post(&url).json(&json!({"claim": "   "})).send().await.unwrap();
    assert_eq!(resp.status(), 400);

    let resp = client
        .post(&url)
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let v: Value = resp.json().await.unwrap();
    assert!(v["error"].is_string());

    let resp = client.post(&url).json(&json!({"text": "x"})).send().await.unwrap();
    assert_eq!(resp.status(), 400);

    let m: MetricsSnapshot = reqwest::get(format!("{}/metrics", server.base))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(m.bad_requests, 4);
    assert_eq!(m.checks, 0);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_checks_do_not_interleave() {
    let p = pipeline(1000);
    let server = start(p.clone()).await;
    let client = reqwest::Client::new();
    let claims: Vec<String> = (0..20)
        .map(|i| format!("explanation {} about topic{} and detail{}", i * 13, i % 37, i * 7))
        .collect();
    let tasks: Vec<_> = claims
        .iter()
        .cloned()
        .map(|claim| {
            let client = client.clone();
            let url = format!("{}/check", server.base);
            tokio::spawn(async move {
                let resp = client.post(url).json(&json!({ "claim": claim })).send().await.unwrap();
                assert_eq!(resp.status(), 200);
                resp.json::<Verdict>().await.unwrap()
            })
        })
        .collect();
    for (claim, task) in claims.iter().zip(tasks) {
        let got = task.await.unwrap();
        assert_eq!(&got.claim, claim);
        assert_eq!(got.without_timings(), p.check_claim(claim).unwrap().without_timings());
    }

    let m: MetricsSnapshot = reqwest::get(format!("{}/metrics", server.base))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(m.checks, 20);
    assert_eq!(m.latency_samples, 20);
    assert!(m.latency_ms.p95_ms >= m.latency_ms.median_ms);
    assert_eq!(m.requests, 21);
    server.shutdown().await;
}
