//! HTTP control plane and live event stream for the ALPR pipeline.
//!
//! One [`Controller`](controller::Controller) behind an async mutex owns
//! start, stop and recording transitions. The pipeline thread publishes
//! detections through a bounded broadcast channel; a subscriber that falls
//! more than [`STREAM_BACKLOG`] messages behind is disconnected rather than
//! slowing the pipeline down.
//!
//! | method | path                    | body / query           |
//! |--------|-------------------------|------------------------|
//! | POST   | `/control/start`        |                        |
//! | POST   | `/control/stop`         |                        |
//! | POST   | `/control/record/start` |                        |
//! | POST   | `/control/record/stop`  |                        |
//! | POST   | `/control/warning`      | `{reason, event_seq?}` |
//! | GET    | `/detections/latest`    | `?n=` (default 10)     |
//! | GET    | `/vehicles/{plate}`     |                        |
//! | GET    | `/metrics`              |                        |
//! | GET    | `/frame/latest`         | PPM of the newest frame|
//! | GET    | `/stream`               | `<type> <json>` lines  |

pub mod controller;
pub mod messages;

use std::collections::HashMap;
use std::convert::Infallible;
use std::future::Future;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};

use alpr_core::config::PipelineConfig;
use alpr_core::imaging;
use alpr_core::pipeline::Backends;
use alpr_core::store::{EventRecord, Store, StoreError};

use controller::{unix_ms, ControlError, Controller, Shared};
use messages::{Metrics, PipelineState, StreamMessage, WarningRecord, WarningRequest};

/// Messages a stream subscriber may fall behind before it is dropped.
pub const STREAM_BACKLOG: usize = 256;
pub const METRICS_INTERVAL: Duration = Duration::from_secs(1);
pub const DEFAULT_LATEST: usize = 10;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {address}: {source}")]
    Bind { address: String, source: std::io::Error },
    #[error("server failed: {0}")]
    Serve(std::io::Error),
}

/// Errors surfaced to HTTP clients as `{"error": ...}`.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::SourceUnavailable(_) | ControlError::NotRunning => ApiError::Conflict(e.to_string()),
            ControlError::Recording(_) => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

/// Append-only NDJSON log of operator warnings.
struct WarningLog {
    path: PathBuf,
    last_ms: u64,
}

impl WarningLog {
    fn append(&mut self, event_seq: Option<u64>, reason: String) -> std::io::Result<WarningRecord> {
        // Wall clocks can step backwards; the log must not.
        self.last_ms = self.last_ms.max(unix_ms());
        let record = WarningRecord { timestamp_ms: self.last_ms, event_seq, reason };
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_vec(&record).map_err(std::io::Error::other)?;
        line.push(b'\n');
        file.write_all(&line)?;
        file.flush()?;
        Ok(record)
    }
}

struct Inner {
    config: Arc<PipelineConfig>,
    shared: Arc<Shared>,
    controller: tokio::sync::Mutex<Controller>,
    warnings: tokio::sync::Mutex<WarningLog>,
    webhook: Option<(reqwest::Client, String)>,
}

/// A running service instance. Cheap to clone.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

impl Service {
    /// Opens the event store and starts the background tasks. Must be
    /// called from within a tokio runtime.
    pub fn new(config: PipelineConfig, backends: Backends) -> Result<Self, ServiceError> {
        let store = Arc::new(Store::open(&config.store_path)?);
        let (hub, _) = broadcast::channel(STREAM_BACKLOG);
        let shared = Arc::new(Shared { store, hub, recorder: Mutex::new(None), latest_frame: Mutex::new(None) });
        let config = Arc::new(config);
        let (finished_tx, mut finished_rx) = mpsc::unbounded_channel();
        let controller = Controller::new(config.clone(), backends, shared.clone(), finished_tx);
        let warnings = WarningLog { path: config.warning_log.clone(), last_ms: 0 };
        let webhook = config.webhook_url.clone().map(|url| (reqwest::Client::new(), url));
        let inner = Arc::new(Inner {
            config,
            shared,
            controller: tokio::sync::Mutex::new(controller),
            warnings: tokio::sync::Mutex::new(warnings),
            webhook,
        });

        // Runs that end on their own (source exhausted or failed) return
        // the service to idle.
        let weak = Arc::downgrade(&inner);
        tokio::spawn(async move {
            while let Some(generation) = finished_rx.recv().await {
                let Some(inner) = weak.upgrade() else { break };
                inner.controller.lock().await.finished(generation).await;
            }
        });

        let weak = Arc::downgrade(&inner);
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(METRICS_INTERVAL);
            loop {
                ticker.tick().await;
                let Some(inner) = weak.upgrade() else { break };
                if inner.shared.hub.receiver_count() > 0 {
                    let metrics = inner.metrics().await;
                    let _ = inner.shared.hub.send(StreamMessage::Metrics(metrics));
                }
            }
        });

        Ok(Self { inner })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.inner.config
    }

    pub fn store(&self) -> &Store {
        &self.inner.shared.store
    }

    pub async fn state(&self) -> PipelineState {
        self.inner.controller.lock().await.state()
    }

    pub async fn start(&self) -> Result<PipelineState, ApiError> {
        Ok(self.inner.controller.lock().await.start()?)
    }

    pub async fn stop(&self) -> PipelineState {
        self.inner.controller.lock().await.stop().await
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/control/start", post(start))
            .route("/control/stop", post(stop))
            .route("/control/record/start", post(record_start))
            .route("/control/record/stop", post(record_stop))
            .route("/control/warning", post(warning))
            .route("/detections/latest", get(latest))
            .route("/vehicles/{plate}", get(vehicles))
            .route("/metrics", get(metrics))
            .route("/frame/latest", get(latest_frame))
            .route("/stream", get(stream))
            .with_state(self.clone())
    }

    /// Serves on `listener` until `shutdown` resolves, then stops any run
    /// and returns its final state.
    pub async fn serve_on<F>(self, listener: TcpListener, shutdown: F) -> Result<PipelineState, ServiceError>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await.map_err(ServiceError::Serve)?;
        Ok(self.stop().await)
    }
}

impl Inner {
    async fn metrics(&self) -> Metrics {
        let controller = self.controller.lock().await;
        Metrics::new(&controller.live_summary(), controller.phase())
    }
}

/// Binds to the configured address and port and serves until `shutdown`.
pub async fn serve<F>(config: PipelineConfig, backends: Backends, shutdown: F) -> Result<PipelineState, ServiceError>
where
    F: Future<Output = ()> + Send + 'static,
{
    let address = format!("{}:{}", config.bind_address, config.port);
    let listener =
        TcpListener::bind(&address).await.map_err(|source| ServiceError::Bind { address: address.clone(), source })?;
    let service = Service::new(config, backends)?;
    log::info!("listening on {}", listener.local_addr().map_or(address, |a| a.to_string()));
    service.serve_on(listener, shutdown).await
}

async fn start(State(svc): State<Service>) -> Result<Json<PipelineState>, ApiError> {
    svc.start().await.map(Json)
}

async fn stop(State(svc): State<Service>) -> Json<PipelineState> {
    Json(svc.stop().await)
}

async fn record_start(State(svc): State<Service>) -> Result<Json<PipelineState>, ApiError> {
    Ok(Json(svc.inner.controller.lock().await.start_recording()?))
}

async fn record_stop(State(svc): State<Service>) -> Json<PipelineState> {
    Json(svc.inner.controller.lock().await.stop_recording())
}

async fn warning(
    State(svc): State<Service>,
    body: Result<Json<WarningRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<WarningRecord>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    if req.reason.trim().is_empty() {
        return Err(ApiError::BadRequest("reason must not be empty".into()));
    }
    if let Some(seq) = req.event_seq {
        if svc.store().get(seq).is_none() {
            return Err(ApiError::NotFound(format!("no event with seq {seq}")));
        }
    }
    let record = svc
        .inner
        .warnings
        .lock()
        .await
        .append(req.event_seq, req.reason)
        .map_err(|e| ApiError::Internal(format!("cannot write warning log: {e}")))?;
    let _ = svc.inner.shared.hub.send(StreamMessage::Warning(record.clone()));
    if let Some((client, url)) = svc.inner.webhook.clone() {
        let payload = record.clone();
        tokio::spawn(async move {
            let body = serde_json::to_vec(&payload).expect("warning serializes");
            let sent = client.post(&url).header(header::CONTENT_TYPE, "application/json").body(body).send().await;
            match sent {
                Ok(resp) if !resp.status().is_success() => log::warn!("webhook {url} answered {}", resp.status()),
                Err(e) => log::warn!("webhook {url} failed: {e}"),
                Ok(_) => {}
            }
        });
    }
    Ok(Json(record))
}

async fn latest(
    State(svc): State<Service>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<Vec<EventRecord>>, ApiError> {
    let n = match params.get("n") {
        None => DEFAULT_LATEST,
        Some(raw) => match raw.parse::<i64>() {
            Ok(n) if n >= 1 => usize::try_from(n).unwrap_or(usize::MAX),
            Ok(_) => return Err(ApiError::BadRequest("n must be at least 1".into())),
            Err(_) => return Err(ApiError::BadRequest(format!("n is not an integer: {raw:?}"))),
        },
    };
    Ok(Json(svc.store().latest(n)))
}

async fn vehicles(State(svc): State<Service>, Path(plate): Path<String>) -> Json<Vec<EventRecord>> {
    Json(svc.store().query_by_plate(&plate))
}

async fn metrics(State(svc): State<Service>) -> Json<Metrics> {
    Json(svc.inner.metrics().await)
}

async fn latest_frame(State(svc): State<Service>) -> Result<Response, ApiError> {
    let frame = svc.inner.shared.latest_frame.lock().expect("frame lock").clone();
    let frame = frame.ok_or_else(|| ApiError::NotFound("no frame processed yet".into()))?;
    let content_type = if frame.channels() == 1 { "image/x-portable-graymap" } else { "image/x-portable-pixmap" };
    Ok(([(header::CONTENT_TYPE, content_type)], imaging::encode_pnm(&frame)).into_response())
}

async fn stream(State(svc): State<Service>) -> Response {
    // Subscribe before reading the state so nothing falls in between.
    let rx = svc.inner.shared.hub.subscribe();
    let first = StreamMessage::State(svc.state().await).to_line();
    let lines = futures::stream::unfold((rx, Some(first)), |(mut rx, pending)| async move {
        if let Some(line) = pending {
            return Some((Ok::<_, Infallible>(Bytes::from(line)), (rx, None)));
        }
        match rx.recv().await {
            Ok(msg) => Some((Ok(Bytes::from(msg.to_line())), (rx, None))),
            Err(broadcast::error::RecvError::Lagged(n)) => {
                log::warn!("stream subscriber fell {n} messages behind; disconnecting");
                None
            }
            Err(broadcast::error::RecvError::Closed) => None,
        }
    });
    ([(header::CONTENT_TYPE, "application/x-ndjson; charset=utf-8")], Body::from_stream(lines)).into_response()
}
