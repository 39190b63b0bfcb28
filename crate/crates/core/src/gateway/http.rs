use async_trait::async_trait;
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{
    Backend, BackendError, ClassifierJob, EmbeddingRequest, EmbeddingResult, FinetuneJob, GenerateResponse,
    GenerationRequest, GenerationResult, Health, JobAccepted, JobStatus, WireError, CONTRACT_HEADER, CONTRACT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://127.0.0.1:8700`.
    pub endpoint: String,
    pub token: Option<String>,
}

/// [`Backend`] over the JSON wire contract.
#[derive(Clone, Debug)]
pub struct HttpBackend {
    client: reqwest::Client,
    base: String,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            client,
            base: cfg.endpoint.trim_end_matches('/').to_owned(),
            token: cfg.token,
        })
    }

    async fn call<Req: Serialize + ?Sized, Res: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&Req>,
    ) -> Result<Res, BackendError> {
        let mut rb = self
            .client
            .request(method, format!("{}{path}", self.base))
            .header(CONTRACT_HEADER, CONTRACT_VERSION);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        if let Some(b) = body {
            rb = rb.json(b);
        }
        let resp = rb.send().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if let Some(v) = resp.headers().get(CONTRACT_HEADER) {
            if v.as_bytes() != CONTRACT_VERSION.as_bytes() {
                return Err(BackendError::Malformed(format!(
                    "service speaks contract {:?}, client speaks {CONTRACT_VERSION}",
                    v
                )));
            }
        }
        let bytes = resp.bytes().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(e.to_string()));
        }
        Err(status_error(status, &bytes))
    }
}

fn status_error(status: StatusCode, body: &[u8]) -> BackendError {
    let default_retry = status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error();
    match serde_json::from_slice::<WireError>(body) {
        Ok(w) => BackendError::Status {
            status: status.as_u16(),
            code: w.error.code,
            message: w.error.message,
            retryable: w.error.retryable,
        },
        Err(_) => BackendError::Status {
            status: status.as_u16(),
            code: status.canonical_reason().unwrap_or("error").to_owned(),
            message: String::from_utf8_lossy(body).chars().take(200).collect(),
            retryable: default_retry,
        },
    }
}

#[async_trait]
impl Backend for HttpBackend {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let resp: GenerateResponse = self.call(Method::POST, "/v1/generate", Some(req)).await?;
        if resp.request_id != req.request_id {
            return Err(BackendError::Malformed(format!(
                "response for {} answers {}",
                req.request_id, resp.request_id
            )));
        }
        resp.into_result()
    }

    async fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingResult, BackendError> {
        self.call(Method::POST, "/v1/embed", Some(req)).await
    }

    async fn submit_finetune(&self, job: &FinetuneJob) -> Result<JobAccepted, BackendError> {
        self.call(Method::POST, "/v1/finetune", Some(job)).await
    }

    async fn job_status(&self, job_id: &str) -> Result<JobStatus, BackendError> {
        self.call::<(), _>(Method::GET, &format!("/v1/jobs/{job_id}"), None)
            .await
    }

    async fn train_classifier(&self, job: &ClassifierJob) -> Result<JobAccepted, BackendError> {
        self.call(Method::POST, "/v1/train-classifier", Some(job)).await
    }

    async fn health(&self) -> Result<Health, BackendError> {
        self.call::<(), _>(Method::GET, "/v1/health", None).await
    }
}
