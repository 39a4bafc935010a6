//! Read-only HTTP service over a loaded pipeline.
//!
//! `POST /check {"claim": "..."}` returns a verdict, `GET /health` reports
//! the index, `GET /metrics` reports request counts and latency. Checks run
//! on the blocking pool so a slow claim never stalls the accept loop.

use std::collections::VecDeque;
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use factcheck_core::eval::StageStats;
use factcheck_core::pipeline::Pipeline;

/// Latency samples kept for `/metrics`.
const LATENCY_WINDOW: usize = 10_000;

#[derive(Default)]
struct Metrics {
    requests: AtomicU64,
    checks: AtomicU64,
    bad_requests: AtomicU64,
    failures: AtomicU64,
    latencies_ms: Mutex<VecDeque<f64>>,
}

impl Metrics {
    fn record_latency(&self, ms: f64) {
        let mut q = self.latencies_ms.lock().unwrap_or_else(|e| e.into_inner());
        if q.len() == LATENCY_WINDOW {
            q.pop_front();
        }
        q.push_back(ms);
    }
}

#[derive(Clone)]
struct AppState {
    pipeline: Arc<Pipeline>,
    metrics: Arc<Metrics>,
}

#[derive(Debug, Deserialize)]
pub struct CheckRequest {
    pub claim: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub checks: u64,
    pub bad_requests: u64,
    pub failures: u64,
    /// Over the most recent successful checks, end to end.
    pub latency_ms: StageStats,
    pub latency_samples: usize,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn check(State(s): State<AppState>, body: Result<Json<CheckRequest>, JsonRejection>) -> Response {
    s.metrics.requests.fetch_add(1, Ordering::Relaxed);
    let claim = match body {
        Ok(Json(req)) if !req.claim.trim().is_empty() => req.claim,
        Ok(_) => {
            s.metrics.bad_requests.fetch_add(1, Ordering::Relaxed);
            return error(StatusCode::BAD_REQUEST, "empty claim");
        }
        Err(rejection) => {
            s.metrics.bad_requests.fetch_add(1, Ordering::Relaxed);
            return error(StatusCode::BAD_REQUEST, rejection.body_text());
        }
    };
    let start = Instant::now();
    let pipeline = s.pipeline.clone();
    let result = tokio::task::spawn_blocking(move || pipeline.check_claim(&claim)).await;
    match result {
        Ok(Ok(verdict)) => {
            s.metrics.checks.fetch_add(1, Ordering::Relaxed);
            s.metrics.record_latency(start.elapsed().as_secs_f64() * 1e3);
            Json(verdict).into_response()
        }
        Ok(Err(e)) => {
            s.metrics.failures.fetch_add(1, Ordering::Relaxed);
            log::warn!("check failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
        Err(join) => {
            s.metrics.failures.fetch_add(1, Ordering::Relaxed);
            error(StatusCode::INTERNAL_SERVER_ERROR, format!("check task failed: {join}"))
        }
    }
}

async fn health(State(s): State<AppState>) -> Response {
    s.metrics.requests.fetch_add(1, Ordering::Relaxed);
    let p = &s.pipeline;
    Json(json!({
        "status": "ok",
        "index_size": p.index().len(),
        "encoder": p.index().encoder_identity(),
        "top_k": p.top_k(),
        "threshold_t": p.threshold().t,
        "tau_b": p.tau_b(),
    }))
    .into_response()
}

async fn metrics(State(s): State<AppState>) -> Json<MetricsSnapshot> {
    s.metrics.requests.fetch_add(1, Ordering::Relaxed);
    let m = &s.metrics;
    let samples: Vec<f64> = m
        .latencies_ms
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .iter()
        .copied()
        .collect();
    Json(MetricsSnapshot {
        requests: m.requests.load(Ordering::Relaxed),
        checks: m.checks.load(Ordering::Relaxed),
        bad_requests: m.bad_requests.load(Ordering::Relaxed),
        failures: m.failures.load(Ordering::Relaxed),
        latency_ms: StageStats::from_samples(&samples),
        latency_samples: samples.len(),
    })
}

pub fn router(pipeline: Arc<Pipeline>) -> Router {
    let state = AppState {
        pipeline,
        metrics: Arc::new(Metrics::default()),
    };
    Router::new()
        .route("/check", post(check))
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    pipeline: Arc<Pipeline>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(pipeline))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            log::error!("cannot listen for Ctrl-C: {e}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(e) => {
                log::error!("cannot listen for SIGTERM: {e}");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}
