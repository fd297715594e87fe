//! Scoring and generation backends behind one interface.
//!
//! Cosine backends expose embeddings and the caller composes the clamped
//! cosine; probability backends (sigmoid, ITM) expose `pair_score` directly.
//! Implementations: an HTTP client for the model server, a deterministic mock
//! and a content-addressed cache that can wrap either.

mod cache;
mod http;
mod limiter;
mod mock;
mod retry;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{ProviderScore, ScoreMethod};

pub use cache::{CacheKey, CachedProvider, CachedValue, ScoreCache};
pub use http::{HealthInfo, HttpProvider};
pub use limiter::{InFlightLimiter, Permit};
pub use mock::MockProvider;
pub use retry::RetryPolicy;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend error {code}: {message}")]
    Backend {
        code: String,
        message: String,
        status: Option<u16>,
    },
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("backend {backend} does not support {operation}")]
    Unsupported { backend: String, operation: &'static str },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ProviderError> },
}

impl ProviderError {
    /// Whether repeating the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Timeout(_) | ProviderError::Transport(_) => true,
            ProviderError::Backend { status, .. } => status.map_or(true, |s| s >= 500 || s == 429),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendName {
    Negclip,
    Clip,
    Siglip,
    Blip2Itm,
    Vlm,
    Mock,
}

impl BackendName {
    /// Scoring method for real backends; `None` for generation-only backends
    /// and for the mock, whose method is configured per instance.
    pub fn default_method(self) -> Option<ScoreMethod> {
        match self {
            BackendName::Negclip | BackendName::Clip => Some(ScoreMethod::CosineClamped),
            BackendName::Siglip => Some(ScoreMethod::SigmoidProb),
            BackendName::Blip2Itm => Some(ScoreMethod::ItmProb),
            BackendName::Vlm | BackendName::Mock => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackendName::Negclip => "negclip",
            BackendName::Clip => "clip",
            BackendName::Siglip => "siglip",
            BackendName::Blip2Itm => "blip2_itm",
            BackendName::Vlm => "vlm",
            BackendName::Mock => "mock",
        }
    }
}

impl fmt::Display for BackendName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "negclip" => Self::Negclip,
            "clip" => Self::Clip,
            "siglip" => Self::Siglip,
            "blip2" | "blip2_itm" => Self::Blip2Itm,
            "vlm" => Self::Vlm,
            "mock" => Self::Mock,
            other => return Err(format!("unknown backend '{other}'")),
        })
    }
}

/// Where a live backend lives and how hard to push it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub base_url: String,
    pub backend_name: BackendName,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry_budget: u32,
    #[serde(skip)]
    pub bearer_token: Option<String>,
}

impl ProviderEndpoint {
    pub fn new(base_url: impl Into<String>, backend_name: BackendName) -> Self {
        Self {
            base_url: base_url.into(),
            backend_name,
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            retry_budget: 3,
            bearer_token: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.max_in_flight == 0 {
            return Err(ProviderError::Validation("max_in_flight must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(ProviderError::Validation("timeout must be positive".into()));
        }
        if self.base_url.is_empty() {
            return Err(ProviderError::Validation("empty base url".into()));
        }
        Ok(())
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Encoded (PNG) image bytes plus their content digest.
#[derive(Clone, PartialEq, Eq)]
pub struct ImagePayload {
    bytes: Vec<u8>,
    digest: String,
}

impl ImagePayload {
    pub fn from_encoded(bytes: Vec<u8>) -> Self {
        let digest = sha256_hex(&bytes);
        Self { bytes, digest }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

impl fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImagePayload")
            .field("len", &self.bytes.len())
            .field("digest", &self.digest)
            .finish()
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub dimension: usize,
    pub normalized: bool,
}

impl EmbeddingVector {
    /// L2-normalises `values`. Fails on empty, non-finite or zero vectors.
    pub fn normalized(values: Vec<f32>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::Decode("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::Decode("non-finite embedding component".into()));
        }
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ProviderError::Decode("zero-norm embedding".into()));
        }
        let values: Vec<f32> = values.into_iter().map(|v| (v as f64 / norm) as f32).collect();
        Ok(Self {
            dimension: values.len(),
            values,
            normalized: true,
        })
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_tokens: u32,
    pub temperature: f32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_tokens: 16,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub image: ImagePayload,
    pub prompt_text: String,
    pub decode: DecodeParams,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.prompt_text.trim().is_empty() {
            return Err(ProviderError::Validation("empty prompt".into()));
        }
        if self.decode.max_tokens == 0 {
            return Err(ProviderError::Validation("max_tokens must be positive".into()));
        }
        if !(self.decode.temperature >= 0.0) {
            return Err(ProviderError::Validation("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

pub(crate) fn validate_phrase(phrase: &str) -> Result<(), ProviderError> {
    if phrase.trim().is_empty() {
        return Err(ProviderError::Validation("empty phrase".into()));
    }
    Ok(())
}

/// A scoring or generation backend. Implementations must be safe to call from
/// many threads at once.
pub trait Provider: Send + Sync {
    fn backend(&self) -> BackendName;

    /// Stable name used in cache keys and reports.
    fn identity(&self) -> String {
        self.backend().to_string()
    }

    /// How `region_score` should combine this backend's outputs.
    fn score_method(&self) -> Option<ScoreMethod> {
        self.backend().default_method()
    }

    fn embed_image(&self, crop: &ImagePayload) -> Result<EmbeddingVector, ProviderError>;

    fn embed_text(&self, phrase: &str) -> Result<EmbeddingVector, ProviderError>;

    fn pair_score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError>;

    /// Raw model text, unmodified.
    fn generate_relation(&self, request: &GenerationRequest) -> Result<String, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn backend(&self) -> BackendName {
        (**self).backend()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn score_method(&self) -> Option<ScoreMethod> {
        (**self).score_method()
    }
    fn embed_image(&self, crop: &ImagePayload) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed_image(crop)
    }
    fn embed_text(&self, phrase: &str) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed_text(phrase)
    }
    fn pair_score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError> {
        (**self).pair_score(crop, phrase)
    }
    fn generate_relation(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        (**self).generate_relation(request)
    }
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn backend(&self) -> BackendName {
        (**self).backend()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn score_method(&self) -> Option<ScoreMethod> {
        (**self).score_method()
    }
    fn embed_image(&self, crop: &ImagePayload) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed_image(crop)
    }
    fn embed_text(&self, phrase: &str) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed_text(phrase)
    }
    fn pair_score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError> {
        (**self).pair_score(crop, phrase)
    }
    fn generate_relation(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        (**self).generate_relation(request)
    }
}

impl Provider for Box<dyn Provider> {
    fn backend(&self) -> BackendName {
        (**self).backend()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn score_method(&self) -> Option<ScoreMethod> {
        (**self).score_method()
    }
    fn embed_image(&self, crop: &ImagePayload) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed_image(crop)
    }
    fn embed_text(&self, phrase: &str) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed_text(phrase)
    }
    fn pair_score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError> {
        (**self).pair_score(crop, phrase)
    }
    fn generate_relation(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        (**self).generate_relation(request)
    }
}
