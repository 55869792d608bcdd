//! HTTP/JSON front end for the docsieve operations.
//!
//! Every operation reads and writes files on the machine running the
//! service; request bodies carry paths and settings, responses carry paths
//! and summary numbers. CPU-heavy work runs on the blocking pool so the
//! accept loop stays responsive.

use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;
use tracing::{info, warn};

use docsieve_core::api::{self, ErrorBody, Health};
use docsieve_core::pipeline::PipelineConfig;
use docsieve_core::Error;

pub const DEFAULT_BIND: &str = "127.0.0.1:7878";

/// A failed request: status code plus message, rendered as [`ErrorBody`].
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            Error::Oracle(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self {
            status: e.status(),
            message: e.body_text(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            warn!(status = %self.status, "{}", self.message);
        }
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type Reply<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> Reply<T>
where
    T: Send + 'static,
    F: FnOnce() -> docsieve_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(ApiError::internal(format!("worker failed: {e}"))),
    }
}

/// Wraps a synchronous operation as a JSON handler.
async fn handle<Req, Resp>(body: Result<Json<Req>, JsonRejection>, op: fn(&Req) -> docsieve_core::Result<Resp>) -> Reply<Resp>
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
{
    let Json(req) = body?;
    blocking(move || op(&req)).await
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// Pipeline runs mix CPU-bound training with async oracle calls; drive them on
/// a blocking thread that re-enters the runtime for the async parts.
async fn run(body: Result<Json<PipelineConfig>, JsonRejection>) -> Reply<docsieve_core::pipeline::RunFiles> {
    let Json(config) = body?;
    let handle = tokio::runtime::Handle::current();
    blocking(move || {
        let files = handle.block_on(api::run(&config))?;
        info!(output = %config.output_dir.display(), accuracy = ?files.report.realized_accuracy, "run finished");
        Ok(files)
    })
    .await
}

async fn sweep(body: Result<Json<PipelineConfig>, JsonRejection>) -> Reply<Vec<docsieve_core::pipeline::TradeoffPoint>> {
    let Json(config) = body?;
    let handle = tokio::runtime::Handle::current();
    blocking(move || handle.block_on(api::sweep(&config))).await
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/synth", post(|b| handle(b, api::synth)))
        .route("/v1/train", post(|b| handle(b, api::train)))
        .route("/v1/score", post(|b| handle(b, api::score)))
        .route("/v1/calibrate", post(|b| handle(b, api::calibrate)))
        .route("/v1/eval", post(|b| handle(b, api::eval)))
        .route("/v1/run", post(run))
        .route("/v1/sweep", post(sweep))
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}
