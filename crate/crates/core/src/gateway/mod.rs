//! Client side of the generation / embedding / training service.
//!
//! [`Backend`] is one service call per method. [`Gateway`] wraps any
//! backend with bounded concurrency, retries with exponential backoff,
//! per-call timeouts and an idempotency cache keyed by `request_id`.
//! [`MockBackend`] is a deterministic in-process backend and
//! [`HttpBackend`] speaks the JSON wire contract; with the `server` feature
//! [`server::router`] serves any backend over that same contract.

mod client;
mod http;
mod mock;
#[cfg(feature = "server")]
pub mod server;
mod wire;

use std::time::Duration;

use async_trait::async_trait;

pub use client::{Gateway, GatewayError, Limits, Outcome, RetryPolicy};
pub use http::{HttpBackend, HttpConfig};
pub use mock::{MockBackend, MockConfig};
pub use wire::*;

/// Value of the [`CONTRACT_HEADER`] sent and expected on every call.
pub const CONTRACT_VERSION: &str = "1";
pub const CONTRACT_HEADER: &str = "x-dtgen-contract";
/// Images up to this many bytes travel inline as base64; larger ones are
/// written to shared storage and referenced by path.
pub const INLINE_LIMIT: usize = 1 << 20;

pub const DEFAULT_GENERATE_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_EMBED_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request invalid: {0}")]
    Validation(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("service returned {status} {code}: {message}")]
    Status {
        status: u16,
        code: String,
        message: String,
        retryable: bool,
    },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("image content hash mismatch: expected {expected}, got {got}")]
    Integrity { expected: String, got: String },
    #[error("rejected: {0}")]
    Rejected(String),
}

impl BackendError {
    /// Transport failures, timeouts, 5xx and 429 are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout(_) => true,
            BackendError::Status { status, retryable, .. } => *retryable || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;
    async fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingResult, BackendError>;
    async fn submit_finetune(&self, job: &FinetuneJob) -> Result<JobAccepted, BackendError>;
    async fn job_status(&self, job_id: &str) -> Result<JobStatus, BackendError>;
    async fn train_classifier(&self, job: &ClassifierJob) -> Result<JobAccepted, BackendError>;
    async fn health(&self) -> Result<Health, BackendError>;
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(req).await
    }
    async fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingResult, BackendError> {
        (**self).embed(req).await
    }
    async fn submit_finetune(&self, job: &FinetuneJob) -> Result<JobAccepted, BackendError> {
        (**self).submit_finetune(job).await
    }
    async fn job_status(&self, job_id: &str) -> Result<JobStatus, BackendError> {
        (**self).job_status(job_id).await
    }
    async fn train_classifier(&self, job: &ClassifierJob) -> Result<JobAccepted, BackendError> {
        (**self).train_classifier(job).await
    }
    async fn health(&self) -> Result<Health, BackendError> {
        (**self).health().await
    }
}
