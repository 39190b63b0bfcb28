use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::future::join_all;
use tokio::sync::Semaphore;

use super::{
    Backend, BackendError, ClassifierJob, EmbeddingRequest, EmbeddingResult, FinetuneJob, GenerationRequest,
    GenerationResult, Health, JobAccepted, JobState, JobStatus, DEFAULT_EMBED_TIMEOUT, DEFAULT_GENERATE_TIMEOUT,
};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Validation(BackendError),
    #[error("max_in_flight must be at least 1")]
    ZeroConcurrency,
    #[error("job {job_id} failed: {reason}")]
    JobFailed { job_id: String, reason: String },
    #[error("job {job_id} did not finish within {waited:?}")]
    JobTimeout { job_id: String, waited: Duration },
    #[error(transparent)]
    Backend(BackendError),
}

/// Exponential backoff: attempt `i` (1-based) that fails is followed by a
/// wait of `base · factor^(i-1)`, capped at `max_delay`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let d = self.base_delay.as_secs_f64() * self.factor.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64(d.min(self.max_delay.as_secs_f64()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limits {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub generate_timeout: Duration,
    pub embed_timeout: Duration,
    /// Timeout for job submission, status and health calls.
    pub control_timeout: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            generate_timeout: DEFAULT_GENERATE_TIMEOUT,
            embed_timeout: DEFAULT_EMBED_TIMEOUT,
            control_timeout: DEFAULT_EMBED_TIMEOUT,
        }
    }
}

/// Result of one logical request after retries.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome<T> {
    pub request_id: String,
    /// Backend calls made for this request; zero for a cache hit.
    pub attempts: u32,
    pub result: Result<T, BackendError>,
}

impl<T> Outcome<T> {
    pub fn retries(&self) -> u32 {
        self.attempts.saturating_sub(1)
    }
}

type Cache<Req, Res> = Mutex<HashMap<String, (Req, Res)>>;

pub struct Gateway<B> {
    backend: B,
    limits: Limits,
    permits: Arc<Semaphore>,
    generated: Cache<GenerationRequest, GenerationResult>,
    embedded: Cache<EmbeddingRequest, EmbeddingResult>,
}

impl<B: Backend> Gateway<B> {
    pub fn new(backend: B, limits: Limits) -> Result<Self, GatewayError> {
        if limits.max_in_flight == 0 {
            return Err(GatewayError::ZeroConcurrency);
        }
        Ok(Gateway {
            backend,
            permits: Arc::new(Semaphore::new(limits.max_in_flight)),
            limits,
            generated: Mutex::default(),
            embedded: Mutex::default(),
        })
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn limits(&self) -> &Limits {
        &self.limits
    }

    /// One outcome per distinct `request_id`, in first-appearance order.
    /// Failures are reported per request; the batch itself only fails on
    /// invalid input.
    pub async fn generate_batch(
        &self,
        requests: &[GenerationRequest],
    ) -> Result<Vec<Outcome<GenerationResult>>, GatewayError> {
        let unique = dedup(requests, GenerationRequest::validate)?;
        let timeout = self.limits.generate_timeout;
        Ok(join_all(unique.into_iter().map(|req| {
            self.cached_call(&self.generated, req, move |r| async move {
                self.with_retry(timeout, || self.backend.generate(&r)).await
            })
        }))
        .await)
    }

    pub async fn embed_batch(
        &self,
        requests: &[EmbeddingRequest],
    ) -> Result<Vec<Outcome<EmbeddingResult>>, GatewayError> {
        let unique = dedup(requests, EmbeddingRequest::validate)?;
        let timeout = self.limits.embed_timeout;
        Ok(join_all(unique.into_iter().map(|req| {
            self.cached_call(&self.embedded, req, move |r| async move {
                self.with_retry(timeout, || self.backend.embed(&r)).await
            })
        }))
        .await)
    }

    pub async fn submit_finetune(&self, job: &FinetuneJob) -> Result<JobAccepted, GatewayError> {
        job.validate().map_err(GatewayError::Validation)?;
        let (_, r) = self
            .with_retry(self.limits.control_timeout, || self.backend.submit_finetune(job))
            .await;
        r.map_err(GatewayError::Backend)
    }

    pub async fn train_classifier(&self, job: &ClassifierJob) -> Result<JobAccepted, GatewayError> {
        let (_, r) = self
            .with_retry(self.limits.control_timeout, || self.backend.train_classifier(job))
            .await;
        r.map_err(GatewayError::Backend)
    }

    pub async fn job_status(&self, job_id: &str) -> Result<JobStatus, GatewayError> {
        let (_, r) = self
            .with_retry(self.limits.control_timeout, || self.backend.job_status(job_id))
            .await;
        r.map_err(GatewayError::Backend)
    }

    /// Poll until the job is done or failed.
    pub async fn wait_for_job(
        &self,
        job_id: &str,
        poll: Duration,
        max_wait: Duration,
    ) -> Result<JobStatus, GatewayError> {
        let start = tokio::time::Instant::now();
        loop {
            let st = self.job_status(job_id).await?;
            match st.state {
                JobState::Done => return Ok(st),
                JobState::Failed => {
                    return Err(GatewayError::JobFailed {
                        job_id: job_id.to_owned(),
                        reason: st.reason.unwrap_or_else(|| "no reason given".into()),
                    })
                }
                JobState::Queued | JobState::Running => {}
            }
            if start.elapsed() >= max_wait {
                return Err(GatewayError::JobTimeout {
                    job_id: job_id.to_owned(),
                    waited: start.elapsed(),
                });
            }
            tokio::time::sleep(poll).await;
        }
    }

    pub async fn health(&self) -> Result<Health, GatewayError> {
        let (_, r) = self
            .with_retry(self.limits.control_timeout, || self.backend.health())
            .await;
        r.map_err(GatewayError::Backend)
    }

    async fn cached_call<Req, Res, F, Fut>(&self, cache: &Cache<Req, Res>, req: Req, call: F) -> Outcome<Res>
    where
        Req: Clone + PartialEq + Keyed,
        Res: Clone,
        F: FnOnce(Req) -> Fut,
        Fut: Future<Output = (u32, Result<Res, BackendError>)>,
    {
        let id = req.key().to_owned();
        if let Some((prev, res)) = cache.lock().expect("cache lock").get(&id) {
            let result = if *prev == req {
                Ok(res.clone())
            } else {
                Err(BackendError::Validation(format!(
                    "request_id {id} reused with different content"
                )))
            };
            return Outcome {
                request_id: id,
                attempts: 0,
                result,
            };
        }
        let (attempts, result) = call(req.clone()).await;
        if let Ok(res) = &result {
            cache.lock().expect("cache lock").insert(id.clone(), (req, res.clone()));
        }
        Outcome {
            request_id: id,
            attempts,
            result,
        }
    }

    /// Run `call` until it succeeds, fails permanently or exhausts the
    /// policy. A permit is held only while a call is in flight, not during
    /// backoff.
    async fn with_retry<T, F, Fut>(&self, timeout: Duration, mut call: F) -> (u32, Result<T, BackendError>)
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T, BackendError>>,
    {
        let policy = self.limits.retry;
        let max = policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                match tokio::time::timeout(timeout, call()).await {
                    Ok(r) => r,
                    Err(_) => Err(BackendError::Timeout(timeout)),
                }
            };
            match result {
                Err(e) if e.is_retryable() && attempt < max => {
                    let wait = policy.delay_after(attempt);
                    tracing::debug!(attempt, ?wait, error = %e, "retrying");
                    tokio::time::sleep(wait).await;
                }
                other => return (attempt, other),
            }
        }
    }
}

trait Keyed {
    fn key(&self) -> &str;
}

impl Keyed for GenerationRequest {
    fn key(&self) -> &str {
        &self.request_id
    }
}

impl Keyed for EmbeddingRequest {
    fn key(&self) -> &str {
        &self.request_id
    }
}

/// Validate and drop repeated request_ids. Repeats must be identical.
fn dedup<R: Clone + PartialEq + Keyed>(
    requests: &[R],
    validate: impl Fn(&R) -> Result<(), BackendError>,
) -> Result<Vec<R>, GatewayError> {
    if requests.is_empty() {
        return Err(GatewayError::EmptyBatch);
    }
    let mut seen: HashMap<&str, &R> = HashMap::new();
    let mut out = Vec::new();
    for r in requests {
        validate(r).map_err(GatewayError::Validation)?;
        match seen.get(r.key()) {
            Some(prev) if *prev != r => {
                return Err(GatewayError::Validation(BackendError::Validation(format!(
                    "request_id {} appears twice with different content",
                    r.key()
                ))))
            }
            Some(_) => {}
            None => {
                seen.insert(r.key(), r);
                out.push(r.clone());
            }
        }
    }
    Ok(out)
}
