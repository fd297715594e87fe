//! Deterministic in-process backend for tests and dry runs.
//!
//! Embeddings are unit vectors seeded from a hash of the input. A crop can be
//! given "seed phrases": its image embedding is then built from those phrases'
//! text embeddings, so scoring a seed phrase against it gives cosine 1 (with a
//! single seed) and probability backends report a high match.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    validate_phrase, BackendName, EmbeddingVector, GenerationRequest, ImagePayload, InFlightLimiter, Provider,
    ProviderError,
};
use crate::imaging::ImageStore;
use crate::metrics::{region_crop, triplet_text, MetricConfig, MetricError, ProviderScore, ScoreMethod};
use crate::model::SceneGraphDataset;

const DEFAULT_DIM: usize = 64;
const SEEDED_PROBABILITY: f64 = 0.95;
/// Unseeded probabilities fall in `[0, UNSEEDED_CEILING)`.
const UNSEEDED_CEILING: f64 = 0.9;

pub const DEFAULT_CANNED_RESPONSES: &[&str] = &[
    "holding",
    "sitting on",
    "Standing next to.",
    "looking at",
    "is riding",
    "on top of",
    "none",
    "has a small light blue handbag attached to",
    "Object 1 is touching Object 2",
    "in front of",
    "near",
    "carrying",
    "leaning on",
    "\"walking toward\"",
    "parked beside",
];

pub struct MockProvider {
    method: Option<ScoreMethod>,
    dim: usize,
    seeds: RwLock<HashMap<String, Vec<String>>>,
    canned: Vec<String>,
    latency: Duration,
    limiter: InFlightLimiter,
    calls: AtomicUsize,
}

impl MockProvider {
    /// Mock scoring backend with the given method. It also answers
    /// generation requests.
    pub fn new(method: ScoreMethod) -> Self {
        Self::build(Some(method))
    }

    /// Generation-only mock.
    pub fn vlm() -> Self {
        Self::build(None)
    }

    fn build(method: Option<ScoreMethod>) -> Self {
        Self {
            method,
            dim: DEFAULT_DIM,
            seeds: RwLock::new(HashMap::new()),
            canned: DEFAULT_CANNED_RESPONSES.iter().map(|s| s.to_string()).collect(),
            latency: Duration::ZERO,
            limiter: InFlightLimiter::new(usize::MAX),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_dimension(mut self, dim: usize) -> Self {
        self.dim = dim.max(1);
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limiter = InFlightLimiter::new(max);
        self
    }

    pub fn with_canned_responses<I, S>(mut self, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.canned = responses.into_iter().map(Into::into).collect();
        if self.canned.is_empty() {
            self.canned.push("none".into());
        }
        self
    }

    /// Marks `phrase` as the correct description of the crop with `digest`.
    pub fn seed(&self, crop_digest: &str, phrase: &str) {
        let mut seeds = self.seeds.write().unwrap_or_else(|e| e.into_inner());
        let entry = seeds.entry(crop_digest.to_string()).or_default();
        if !entry.iter().any(|p| p == phrase) {
            entry.push(phrase.to_string());
            entry.sort();
        }
    }

    /// Seeds every groundtruth triplet of `dataset` on its own region crop,
    /// turning the mock into an always-right scorer. Returns the number of
    /// seeds planted.
    pub fn seed_from_groundtruth(
        &self,
        dataset: &SceneGraphDataset,
        store: &ImageStore,
        config: &MetricConfig,
    ) -> Result<usize, MetricError> {
        let mut planted = 0;
        for img in dataset.images().iter().filter(|i| !i.relations.is_empty()) {
            let image_err = |message: String| MetricError::Image {
                image_id: img.image_id.clone(),
                message,
            };
            let px = store.load(img).map_err(|e| image_err(e.to_string()))?;
            for r in &img.relations {
                let (Some(s), Some(o)) = (img.object(r.subject_id), img.object(r.object_id)) else {
                    continue;
                };
                let (_, crop) = region_crop(&img.image_id, &px, &s.bbox, &o.bbox, config.crop_expansion)
                    .map_err(|e| image_err(e.to_string()))?;
                self.seed(crop.digest(), &triplet_text(&config.triplet_template, &s.label, &r.predicate, &o.label));
                planted += 1;
            }
        }
        Ok(planted)
    }

    /// Total backend operations served (cache hits never reach the mock).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Concurrency probe: the most requests ever in flight together.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    fn enter(&self) -> super::Permit<'_> {
        let permit = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        permit
    }

    fn rng_for(tag: &str, data: &[u8]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(tag.as_bytes());
        h.update([0u8]);
        h.update(data);
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn hashed_vector(&self, tag: &str, data: &[u8]) -> Vec<f32> {
        let mut rng = Self::rng_for(tag, data);
        (0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn text_vector(&self, phrase: &str) -> Vec<f32> {
        let v = self.hashed_vector("text", phrase.as_bytes());
        normalize(v)
    }

    fn seeds_for(&self, digest: &str) -> Option<Vec<String>> {
        self.seeds.read().unwrap_or_else(|e| e.into_inner()).get(digest).cloned()
    }
}

fn normalize(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x as f64 / n) as f32).collect()
}

impl Provider for MockProvider {
    fn backend(&self) -> BackendName {
        BackendName::Mock
    }

    fn identity(&self) -> String {
        match self.method {
            Some(m) => format!("mock-{m}"),
            None => "mock-vlm".to_string(),
        }
    }

    fn score_method(&self) -> Option<ScoreMethod> {
        self.method
    }

    fn embed_image(&self, crop: &ImagePayload) -> Result<EmbeddingVector, ProviderError> {
        let _p = self.enter();
        let v = match self.seeds_for(crop.digest()) {
            Some(phrases) => {
                let mut acc = vec![0.0f32; self.dim];
                for p in &phrases {
                    for (a, x) in acc.iter_mut().zip(self.text_vector(p)) {
                        *a += x;
                    }
                }
                acc
            }
            None => self.hashed_vector("image", crop.digest().as_bytes()),
        };
        EmbeddingVector::normalized(v)
    }

    fn embed_text(&self, phrase: &str) -> Result<EmbeddingVector, ProviderError> {
        validate_phrase(phrase)?;
        let _p = self.enter();
        EmbeddingVector::normalized(self.text_vector(phrase))
    }

    fn pair_score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError> {
        validate_phrase(phrase)?;
        let method = match self.method {
            Some(m) if !m.is_cosine() => m,
            _ => {
                return Err(ProviderError::Unsupported {
                    backend: self.identity(),
                    operation: "pair_score",
                })
            }
        };
        let _p = self.enter();
        let seeded = self
            .seeds_for(crop.digest())
            .is_some_and(|s| s.iter().any(|p| p == phrase));
        let value = if seeded {
            SEEDED_PROBABILITY
        } else {
            let mut key = crop.digest().as_bytes().to_vec();
            key.push(0);
            key.extend_from_slice(phrase.as_bytes());
            Self::rng_for("pair", &key).random_range(0.0..UNSEEDED_CEILING)
        };
        ProviderScore::new(value, method).map_err(|e| ProviderError::Decode(e.to_string()))
    }

    fn generate_relation(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        request.validate()?;
        let _p = self.enter();
        let mut key = request.image.digest().as_bytes().to_vec();
        key.push(0);
        key.extend_from_slice(request.prompt_text.as_bytes());
        let idx = Self::rng_for("generate", &key).random_range(0..self.canned.len());
        Ok(self.canned[idx].clone())
    }
}
