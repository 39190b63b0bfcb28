//! Serve any [`Backend`] over the wire contract. Used by the mock server
//! command and by the HTTP round-trip tests.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{
    Backend, BackendError, GenerateResponse, GenerationRequest, ImagePayload, WireError, WireErrorBody,
    CONTRACT_HEADER, CONTRACT_VERSION, INLINE_LIMIT,
};
use crate::store::blob_rel_path;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Require `Authorization: Bearer <token>` when set.
    pub token: Option<String>,
    /// Where images above `inline_limit` are written; without it every
    /// image goes inline.
    pub blob_dir: Option<PathBuf>,
    pub inline_limit: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            token: None,
            blob_dir: None,
            inline_limit: INLINE_LIMIT,
        }
    }
}

struct AppState {
    backend: Arc<dyn Backend>,
    cfg: ServerConfig,
}

type Shared = State<Arc<AppState>>;

pub fn router(backend: Arc<dyn Backend>, cfg: ServerConfig) -> Router {
    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/embed", post(embed))
        .route("/v1/finetune", post(finetune))
        .route("/v1/train-classifier", post(train_classifier))
        .route("/v1/jobs/{id}", get(job_status))
        .route("/v1/health", get(health))
        .fallback(|| async { wire_error(StatusCode::NOT_FOUND, "not_found", "no such endpoint", false) })
        .with_state(Arc::new(AppState { backend, cfg }))
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    backend: Arc<dyn Backend>,
    cfg: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(backend, cfg))
        .with_graceful_shutdown(shutdown)
        .await
}

fn wire_error(status: StatusCode, code: &str, message: &str, retryable: bool) -> Response {
    let body = WireError {
        error: WireErrorBody {
            code: code.into(),
            message: message.into(),
            retryable,
        },
    };
    (status, [(CONTRACT_HEADER, CONTRACT_VERSION)], Json(body)).into_response()
}

fn error_response(e: &BackendError) -> Response {
    let msg = e.to_string();
    match e {
        BackendError::Validation(_) => wire_error(StatusCode::BAD_REQUEST, "invalid_request", &msg, false),
        BackendError::Rejected(m) => wire_error(StatusCode::UNPROCESSABLE_ENTITY, "rejected", m, false),
        BackendError::Status {
            status,
            code,
            message,
            retryable,
        } => wire_error(
            StatusCode::from_u16(*status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            code,
            message,
            *retryable,
        ),
        BackendError::Timeout(_) => wire_error(StatusCode::GATEWAY_TIMEOUT, "timeout", &msg, true),
        BackendError::Transport(_) => wire_error(StatusCode::BAD_GATEWAY, "upstream", &msg, true),
        BackendError::Malformed(_) | BackendError::Integrity { .. } => {
            wire_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", &msg, true)
        }
    }
}

fn ok<T: Serialize>(body: T) -> Response {
    (StatusCode::OK, [(CONTRACT_HEADER, CONTRACT_VERSION)], Json(body)).into_response()
}

#[allow(clippy::result_large_err)]
fn check(state: &AppState, headers: &HeaderMap) -> Result<(), Response> {
    if let Some(v) = headers.get(CONTRACT_HEADER) {
        if v.as_bytes() != CONTRACT_VERSION.as_bytes() {
            return Err(wire_error(
                StatusCode::BAD_REQUEST,
                "contract_mismatch",
                &format!("server speaks contract {CONTRACT_VERSION}"),
                false,
            ));
        }
    }
    if let Some(token) = &state.cfg.token {
        let expected = format!("Bearer {token}");
        if headers.get("authorization").map(|v| v.as_bytes()) != Some(expected.as_bytes()) {
            return Err(wire_error(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong bearer token",
                false,
            ));
        }
    }
    Ok(())
}

#[allow(clippy::result_large_err)]
fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(body)
        .map_err(|e| wire_error(StatusCode::BAD_REQUEST, "invalid_request", &format!("body: {e}"), false))
}

fn respond<T: Serialize>(r: Result<T, BackendError>) -> Response {
    match r {
        Ok(v) => ok(v),
        Err(e) => error_response(&e),
    }
}

async fn generate(State(s): Shared, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = check(&s, &headers) {
        return r;
    }
    let req: GenerationRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let res = match s.backend.generate(&req).await {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    let image = match (&s.cfg.blob_dir, res.image.len() > s.cfg.inline_limit) {
        (Some(dir), true) => {
            let path = dir.join(blob_rel_path(&res.content_hash));
            let written = path
                .parent()
                .map_or(Ok(()), std::fs::create_dir_all)
                .and_then(|_| std::fs::write(&path, &res.image));
            if let Err(e) = written {
                return wire_error(StatusCode::INTERNAL_SERVER_ERROR, "storage", &e.to_string(), true);
            }
            ImagePayload::Path {
                path: path.to_string_lossy().into_owned(),
            }
        }
        _ => ImagePayload::inline(&res.image),
    };
    ok(GenerateResponse {
        request_id: res.request_id,
        image,
        content_hash: res.content_hash.to_hex(),
        metadata: res.metadata,
    })
}

async fn embed(State(s): Shared, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = check(&s, &headers) {
        return r;
    }
    match parse(&body) {
        Ok(req) => respond(s.backend.embed(&req).await),
        Err(r) => r,
    }
}

async fn finetune(State(s): Shared, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = check(&s, &headers) {
        return r;
    }
    match parse(&body) {
        Ok(job) => respond(s.backend.submit_finetune(&job).await),
        Err(r) => r,
    }
}

async fn train_classifier(State(s): Shared, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = check(&s, &headers) {
        return r;
    }
    match parse(&body) {
        Ok(job) => respond(s.backend.train_classifier(&job).await),
        Err(r) => r,
    }
}

async fn job_status(State(s): Shared, headers: HeaderMap, Path(id): Path<String>) -> Response {
    if let Err(r) = check(&s, &headers) {
        return r;
    }
    respond(s.backend.job_status(&id).await)
}

async fn health(State(s): Shared, headers: HeaderMap) -> Response {
    if let Err(r) = check(&s, &headers) {
        return r;
    }
    respond(s.backend.health().await)
}
