use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::labels::Task;
use crate::seed::ContentHash;

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Idempotency key; resubmitting returns the first result.
    pub request_id: String,
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Validation(format!("{}: {m}", self.request_id)));
        if self.request_id.is_empty() {
            return Err(BackendError::Validation("empty request_id".into()));
        }
        if self.prompt.is_empty() {
            return bad("empty prompt");
        }
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMetadata {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationResult {
    pub request_id: String,
    /// Encoded PNG.
    pub image: Vec<u8>,
    pub content_hash: ContentHash,
    pub metadata: BackendMetadata,
}

impl GenerationResult {
    pub fn new(request_id: impl Into<String>, image: Vec<u8>, metadata: BackendMetadata) -> Self {
        GenerationResult {
            request_id: request_id.into(),
            content_hash: ContentHash::of(&image),
            image,
            metadata,
        }
    }
}

/// Image bytes on the wire: inline base64, or a path on storage shared by
/// client and service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    Inline { data: String },
    Path { path: String },
}

impl ImagePayload {
    pub fn inline(bytes: &[u8]) -> Self {
        ImagePayload::Inline {
            data: B64.encode(bytes),
        }
    }

    pub fn resolve(&self) -> Result<Vec<u8>, BackendError> {
        match self {
            ImagePayload::Inline { data } => B64
                .decode(data)
                .map_err(|e| BackendError::Malformed(format!("image base64: {e}"))),
            ImagePayload::Path { path } => {
                std::fs::read(Path::new(path)).map_err(|e| BackendError::Malformed(format!("image path {path}: {e}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub request_id: String,
    pub image: ImagePayload,
    pub content_hash: String,
    pub metadata: BackendMetadata,
}

impl GenerateResponse {
    /// Materialize the image and check it against `content_hash`.
    pub fn into_result(self) -> Result<GenerationResult, BackendError> {
        let image = self.image.resolve()?;
        let got = ContentHash::of(&image).to_hex();
        if got != self.content_hash {
            return Err(BackendError::Integrity {
                expected: self.content_hash,
                got,
            });
        }
        Ok(GenerationResult::new(self.request_id, image, self.metadata))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "snake_case")]
pub enum EmbeddingInput {
    Text { text: String },
    Image { image: ImagePayload },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub request_id: String,
    pub input: EmbeddingInput,
}

impl EmbeddingRequest {
    pub fn text(request_id: impl Into<String>, text: impl Into<String>) -> Self {
        EmbeddingRequest {
            request_id: request_id.into(),
            input: EmbeddingInput::Text { text: text.into() },
        }
    }

    pub fn image(request_id: impl Into<String>, png: &[u8]) -> Self {
        EmbeddingRequest {
            request_id: request_id.into(),
            input: EmbeddingInput::Image {
                image: ImagePayload::inline(png),
            },
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.request_id.is_empty() {
            return Err(BackendError::Validation("empty request_id".into()));
        }
        if let EmbeddingInput::Text { text } = &self.input {
            if text.is_empty() {
                return Err(BackendError::Validation(format!("{}: empty text", self.request_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub request_id: String,
    pub vector: Vec<f64>,
    pub model_id: String,
}

/// Dataset manifest a fine-tune job trains on. `sha256` pins the exact
/// manifest bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRef {
    pub path: String,
    pub sha256: String,
    pub records: u64,
}

impl ManifestRef {
    pub fn for_file(path: &Path, records: u64) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(ManifestRef {
            path: path.to_string_lossy().into_owned(),
            sha256: ContentHash::of(&bytes).to_hex(),
            records,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJob {
    pub manifest: ManifestRef,
    pub rank: usize,
    pub steps: u32,
    pub lambda: f64,
    pub mu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_model: Option<String>,
    /// Projections that receive adapters; defaults to the four attention
    /// projections.
    #[serde(default = "default_targets")]
    pub target_modules: Vec<String>,
    /// Caption per training image, keyed by sample id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub captions: BTreeMap<String, String>,
}

fn default_targets() -> Vec<String> {
    ["to_q", "to_k", "to_v", "to_out"].map(String::from).to_vec()
}

impl FinetuneJob {
    pub fn new(manifest: ManifestRef, rank: usize, steps: u32, lambda: f64, mu: f64) -> Self {
        FinetuneJob {
            manifest,
            rank,
            steps,
            lambda,
            mu,
            base_model: None,
            target_modules: default_targets(),
            captions: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.rank == 0 {
            return Err(BackendError::Validation("rank must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(BackendError::Validation("steps must be at least 1".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(BackendError::Validation(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if self.target_modules.is_empty() {
            return Err(BackendError::Validation("no target modules".into()));
        }
        if self.captions.len() as u64 > self.manifest.records {
            return Err(BackendError::Validation(format!(
                "{} captions for {} records",
                self.captions.len(),
                self.manifest.records
            )));
        }
        if let Some((id, _)) = self.captions.iter().find(|(_, c)| c.trim().is_empty()) {
            return Err(BackendError::Validation(format!("{id}: empty caption")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierJob {
    /// Export bundle directory (holds `index.csv`).
    pub bundle: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    pub epochs: u32,
    /// Optional prediction-file input set; the job writes predictions for it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_set: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
    /// The job as understood by the worker.
    pub echo: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    /// `ok` or `degraded`.
    pub status: String,
    pub contract: String,
    #[serde(default)]
    pub models: BTreeMap<String, String>,
}

/// Error body returned with every non-2xx response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub error: WireErrorBody,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireErrorBody {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}
