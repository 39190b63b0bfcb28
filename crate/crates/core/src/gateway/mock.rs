use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{
    Backend, BackendError, BackendMetadata, ClassifierJob, EmbeddingInput, EmbeddingRequest, EmbeddingResult,
    FinetuneJob, GenerationRequest, GenerationResult, Health, JobAccepted, JobState, JobStatus, CONTRACT_VERSION,
};
use crate::image::{self, PROMPT_KEY, SEED_KEY};
use crate::seed::{hash_parts, rng_from_bytes, ContentHash};

/// Knobs of the mock. Every output is a pure function of the request and
/// these settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MockConfig {
    pub model_id: String,
    pub embed_model_id: String,
    pub embed_dim: usize,
    /// Cosine between a generated image's vector and its prompt's vector
    /// is drawn from N(mean, sd) ...
    pub alignment_mean: f64,
    pub alignment_sd: f64,
    /// ... except for this fraction of images, drawn from U(lo, hi).
    pub misaligned_rate: f64,
    pub misaligned_range: (f64, f64),
    /// Simulated service time per call.
    pub latency: Duration,
    /// The first `n` attempts of every request fail with a retryable 503.
    pub transient_failures: u32,
    /// Requests whose id hashes below this fraction always fail with 503.
    pub permanent_failure_rate: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            model_id: "mock-diffusion".into(),
            embed_model_id: "mock-clip".into(),
            embed_dim: 512,
            alignment_mean: 0.9,
            alignment_sd: 0.015,
            misaligned_rate: 0.08,
            misaligned_range: (0.35, 0.7),
            latency: Duration::ZERO,
            transient_failures: 0,
            permanent_failure_rate: 0.0,
        }
    }
}

/// In-process backend with deterministic outputs, fault injection and
/// concurrency instrumentation.
#[derive(Default)]
pub struct MockBackend {
    cfg: MockConfig,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicU64,
    attempts: Mutex<HashMap<String, u32>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
}

struct InFlight<'a>(&'a MockBackend);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

fn unavailable(msg: &str) -> BackendError {
    BackendError::Status {
        status: 503,
        code: "unavailable".into(),
        message: msg.into(),
        retryable: true,
    }
}

impl MockBackend {
    pub fn new(cfg: MockConfig) -> Self {
        MockBackend {
            cfg,
            ..MockBackend::default()
        }
    }

    pub fn config(&self) -> &MockConfig {
        &self.cfg
    }

    /// Highest number of calls observed in flight at once.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Total generate and embed calls, including failed attempts.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Attempts seen for one request id.
    pub fn attempts_for(&self, request_id: &str) -> u32 {
        self.attempts
            .lock()
            .expect("lock")
            .get(request_id)
            .copied()
            .unwrap_or(0)
    }

    /// Deterministic unit vector for a text.
    pub fn text_vector(&self, text: &str) -> Vec<f64> {
        let mut rng = rng_from_bytes(&hash_parts([b"mock-text".as_slice(), text.as_bytes()]));
        unit(
            (0..self.cfg.embed_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        )
    }

    /// The PNG the mock produces for a request.
    pub fn render(&self, req: &GenerationRequest) -> Vec<u8> {
        let key = hash_parts([
            b"mock-image".as_slice(),
            req.prompt.as_bytes(),
            &req.seed.to_le_bytes(),
            &req.width.to_le_bytes(),
            &req.height.to_le_bytes(),
            &req.steps.to_le_bytes(),
            req.adapter_id.as_deref().unwrap_or("").as_bytes(),
        ]);
        let rgb = image::blocky_rgb(&key, req.width, req.height);
        let seed = req.seed.to_string();
        image::encode_rgb(
            req.width,
            req.height,
            &rgb,
            &[(PROMPT_KEY, &req.prompt), (SEED_KEY, &seed)],
        )
        .expect("valid raster")
    }

    fn image_vector(&self, png: &[u8]) -> Result<Vec<f64>, BackendError> {
        let decoded = image::decode(png).map_err(|e| BackendError::Rejected(e.to_string()))?;
        let id = ContentHash::of(png);
        let mut rng = rng_from_bytes(&hash_parts([b"mock-image-embed".as_slice(), id.as_bytes()]));
        let noise: Vec<f64> = (0..self.cfg.embed_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let Some(prompt) = decoded.text.get(PROMPT_KEY) else {
            return Ok(unit(noise));
        };
        let t = self.text_vector(prompt);
        let c = if rng.random::<f64>() < self.cfg.misaligned_rate {
            let (lo, hi) = self.cfg.misaligned_range;
            rng.random_range(lo..hi)
        } else {
            Normal::new(self.cfg.alignment_mean, self.cfg.alignment_sd)
                .expect("valid sd")
                .sample(&mut rng)
        }
        .clamp(-1.0, 1.0);
        // Component of the noise orthogonal to t.
        let dot: f64 = noise.iter().zip(&t).map(|(a, b)| a * b).sum();
        let perp = unit(noise.iter().zip(&t).map(|(n, ti)| n - dot * ti).collect());
        let s = (1.0 - c * c).sqrt();
        Ok(t.iter().zip(&perp).map(|(ti, pi)| c * ti + s * pi).collect())
    }

    /// Instrumentation and fault injection shared by generate and embed.
    async fn enter(&self, request_id: &str) -> Result<InFlight<'_>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let guard = InFlight(self);
        if !self.cfg.latency.is_zero() {
            tokio::time::sleep(self.cfg.latency).await;
        }
        let attempt = {
            let mut a = self.attempts.lock().expect("lock");
            let n = a.entry(request_id.to_owned()).or_default();
            *n += 1;
            *n
        };
        if self.cfg.permanent_failure_rate > 0.0 {
            let h = hash_parts([b"mock-fail".as_slice(), request_id.as_bytes()]);
            let u = (u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.cfg.permanent_failure_rate {
                return Err(unavailable("injected permanent failure"));
            }
        }
        if attempt <= self.cfg.transient_failures {
            return Err(unavailable("injected transient failure"));
        }
        Ok(guard)
    }

    fn job_id(kind: &str, body: &serde_json::Value) -> String {
        let h = hash_parts([b"mock-job".as_slice(), kind.as_bytes(), body.to_string().as_bytes()]);
        format!("{kind}-{}", hex::encode(&h[..8]))
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let _g = self.enter(&req.request_id).await?;
        Ok(GenerationResult::new(
            req.request_id.clone(),
            self.render(req),
            BackendMetadata {
                model_id: self.cfg.model_id.clone(),
                adapter_id: req.adapter_id.clone(),
                elapsed_ms: 0,
            },
        ))
    }

    async fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingResult, BackendError> {
        req.validate()?;
        let _g = self.enter(&req.request_id).await?;
        let vector = match &req.input {
            EmbeddingInput::Text { text } => self.text_vector(text),
            EmbeddingInput::Image { image } => self.image_vector(&image.resolve()?)?,
        };
        Ok(EmbeddingResult {
            request_id: req.request_id.clone(),
            vector,
            model_id: self.cfg.embed_model_id.clone(),
        })
    }

    async fn submit_finetune(&self, job: &FinetuneJob) -> Result<JobAccepted, BackendError> {
        job.validate()?;
        let bytes = std::fs::read(&job.manifest.path)
            .map_err(|e| BackendError::Rejected(format!("manifest {} not readable: {e}", job.manifest.path)))?;
        let actual = ContentHash::of(&bytes).to_hex();
        if actual != job.manifest.sha256 {
            return Err(BackendError::Rejected(format!(
                "manifest {} has sha256 {actual}, job expects {}",
                job.manifest.path, job.manifest.sha256
            )));
        }
        if job.manifest.records == 0 {
            return Err(BackendError::Rejected("manifest holds no training records".into()));
        }
        let echo = serde_json::to_value(job).expect("job serializes");
        // The id ignores where the manifest lives; its hash pins the content.
        let mut keyed = job.clone();
        keyed.manifest.path.clear();
        let job_id = Self::job_id("ft", &serde_json::to_value(&keyed).expect("job serializes"));
        let adapter_id = format!("adapter-{}", &job_id[3..]);
        self.jobs.lock().expect("lock").insert(
            job_id.clone(),
            JobStatus {
                job_id: job_id.clone(),
                state: JobState::Done,
                adapter_id: Some(adapter_id.clone()),
                reason: None,
                predictions: None,
            },
        );
        Ok(JobAccepted {
            job_id,
            adapter_id: Some(adapter_id),
            echo,
        })
    }

    async fn job_status(&self, job_id: &str) -> Result<JobStatus, BackendError> {
        self.jobs
            .lock()
            .expect("lock")
            .get(job_id)
            .cloned()
            .ok_or_else(|| BackendError::Status {
                status: 404,
                code: "not_found".into(),
                message: format!("no job {job_id}"),
                retryable: false,
            })
    }

    async fn train_classifier(&self, job: &ClassifierJob) -> Result<JobAccepted, BackendError> {
        let index = std::path::Path::new(&job.bundle).join(crate::store::INDEX_FILE);
        if !index.exists() {
            return Err(BackendError::Rejected(format!(
                "bundle {} has no index.csv",
                job.bundle
            )));
        }
        let echo = serde_json::to_value(job).expect("job serializes");
        let job_id = Self::job_id("clf", &echo);
        self.jobs.lock().expect("lock").insert(
            job_id.clone(),
            JobStatus {
                job_id: job_id.clone(),
                state: JobState::Done,
                adapter_id: None,
                reason: None,
                predictions: None,
            },
        );
        Ok(JobAccepted {
            job_id,
            adapter_id: None,
            echo,
        })
    }

    async fn health(&self) -> Result<Health, BackendError> {
        Ok(Health {
            status: "ok".into(),
            contract: CONTRACT_VERSION.into(),
            models: [
                ("generator".to_owned(), self.cfg.model_id.clone()),
                ("embedder".to_owned(), self.cfg.embed_model_id.clone()),
            ]
            .into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::cosine_score;

    fn req(id: &str, prompt: &str, seed: u64) -> GenerationRequest {
        GenerationRequest {
            request_id: id.into(),
            prompt: prompt.into(),
            seed,
            width: 16,
            height: 16,
            steps: 4,
            adapter_id: None,
        }
    }

    #[tokio::test]
    async fn image_is_function_of_prompt_and_seed() {
        let m = MockBackend::default();
        let a = m.generate(&req("a", "a bowl", 1)).await.unwrap();
        let b = m.generate(&req("b", "a bowl", 1)).await.unwrap();
        let c = m.generate(&req("c", "a bowl", 2)).await.unwrap();
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, c.image);
        assert_eq!(a.content_hash, ContentHash::of(&a.image));
    }

    #[tokio::test]
    async fn embeddings_are_unit_and_aligned() {
        let m = MockBackend::default();
        let t = m.text_vector("a bowl");
        assert!((t.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t, m.text_vector("a bowl"));

        let mut high = 0;
        for seed in 0..50 {
            let img = m.generate(&req(&format!("g{seed}"), "a bowl", seed)).await.unwrap();
            let e = m
                .embed(&EmbeddingRequest::image(format!("e{seed}"), &img.image))
                .await
                .unwrap();
            let c = cosine_score(&e.vector, &t).unwrap();
            assert!((0.3..=1.0).contains(&c));
            if c > 0.85 {
                high += 1;
            }
        }
        assert!(high >= 40, "{high}");
    }

    #[tokio::test]
    async fn finetune_checks_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, b"{}\n").unwrap();
        let m = MockBackend::default();
        let good = super::super::ManifestRef::for_file(&path, 40).unwrap();
        let ok = m
            .submit_finetune(&FinetuneJob::new(good.clone(), 8, 1000, 0.0, 0.0))
            .await
            .unwrap();
        assert_eq!(ok.echo["rank"], 8);
        assert_eq!(m.job_status(&ok.job_id).await.unwrap().state, JobState::Done);

        let missing = super::super::ManifestRef {
            path: dir.path().join("nope").to_string_lossy().into_owned(),
            ..good
        };
        assert!(matches!(
            m.submit_finetune(&FinetuneJob::new(missing, 8, 1000, 0.0, 0.0)).await,
            Err(BackendError::Rejected(_))
        ));
    }
}
