//! Content-addressed store of backend results.
//!
//! Entries are keyed by a SHA-256 over (operation, backend, crop digest,
//! phrase). On disk the cache is a record log, one `digest<TAB>json` line per
//! entry in digest order, closed by a `#sha256 <hex>` trailer covering every
//! preceding byte. A file that fails the checksum is discarded with a warning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendName, DecodeParams, EmbeddingVector, GenerationRequest, ImagePayload, Provider, ProviderError,
};
use crate::metrics::{ProviderScore, ScoreMethod};

const TRAILER_PREFIX: &str = "#sha256 ";

#[derive(Debug, Clone, PartialEq)]
pub enum CacheKey<'a> {
    ImageEmbedding { backend: &'a str, crop_digest: &'a str },
    TextEmbedding { backend: &'a str, phrase: &'a str },
    PairScore { backend: &'a str, crop_digest: &'a str, phrase: &'a str },
    Generation { backend: &'a str, crop_digest: &'a str, prompt: &'a str, decode: DecodeParams },
}

impl CacheKey<'_> {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |s: &str| {
            h.update(s.as_bytes());
            h.update([0u8]);
        };
        match self {
            CacheKey::ImageEmbedding { backend, crop_digest } => {
                put("embed_image");
                put(backend);
                put(crop_digest);
            }
            CacheKey::TextEmbedding { backend, phrase } => {
                put("embed_text");
                put(backend);
                put(phrase);
            }
            CacheKey::PairScore { backend, crop_digest, phrase } => {
                put("pair_score");
                put(backend);
                put(crop_digest);
                put(phrase);
            }
            CacheKey::Generation { backend, crop_digest, prompt, decode } => {
                put("generate");
                put(backend);
                put(crop_digest);
                put(prompt);
                put(&format!("{}:{}", decode.max_tokens, decode.temperature));
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachedValue {
    Vector { values: Vec<f32> },
    Score { value: f64, method: ScoreMethod },
    Text { text: String },
}

#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: RwLock<BTreeMap<String, CachedValue>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a persisted cache. A missing file gives an empty cache; a corrupt
    /// one is ignored with a warning.
    pub fn load(path: &Path) -> Self {
        match fs::read(path) {
            Ok(bytes) => match parse_log(&bytes) {
                Ok(entries) => Self {
                    entries: RwLock::new(entries),
                    ..Default::default()
                },
                Err(reason) => {
                    log::warn!("score cache {} is corrupt ({reason}); starting from empty", path.display());
                    Self::default()
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Self::default(),
            Err(e) => {
                log::warn!("cannot read score cache {}: {e}; starting from empty", path.display());
                Self::default()
            }
        }
    }

    /// Persists every entry, keeping any valid entries already in the file.
    pub fn store(&self, path: &Path) -> std::io::Result<()> {
        let mut merged = match fs::read(path) {
            Ok(bytes) => parse_log(&bytes).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        merged.extend(self.entries.read().unwrap_or_else(|e| e.into_inner()).clone());
        let mut body = Vec::new();
        for (digest, value) in &merged {
            body.extend_from_slice(digest.as_bytes());
            body.push(b'\t');
            serde_json::to_writer(&mut body, value).map_err(std::io::Error::other)?;
            body.push(b'\n');
        }
        let checksum = hex::encode(Sha256::digest(&body));
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            writeln!(f, "{TRAILER_PREFIX}{checksum}")?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)
    }

    pub fn get(&self, key: &CacheKey<'_>) -> Option<CachedValue> {
        let found = self
            .entries
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&key.digest())
            .cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn insert(&self, key: &CacheKey<'_>, value: CachedValue) {
        self.entries
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key.digest(), value);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> BTreeMap<String, CachedValue> {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

fn parse_log(bytes: &[u8]) -> Result<BTreeMap<String, CachedValue>, String> {
    let text = std::str::from_utf8(bytes).map_err(|_| "not utf-8".to_string())?;
    let body_end = text
        .trim_end_matches('\n')
        .rfind('\n')
        .map(|i| i + 1)
        .unwrap_or(0);
    let (body, trailer) = text.split_at(body_end);
    let expected = trailer
        .trim_end()
        .strip_prefix(TRAILER_PREFIX)
        .ok_or_else(|| "missing checksum trailer".to_string())?;
    let actual = hex::encode(Sha256::digest(body.as_bytes()));
    if actual != expected {
        return Err("checksum mismatch".into());
    }
    let mut out = BTreeMap::new();
    for (n, line) in body.lines().enumerate() {
        let (digest, json) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: missing tab", n + 1))?;
        let value: CachedValue = serde_json::from_str(json).map_err(|e| format!("line {}: {e}", n + 1))?;
        out.insert(digest.to_string(), value);
    }
    Ok(out)
}

/// Serves repeated requests from a [`ScoreCache`], forwarding misses.
pub struct CachedProvider<P> {
    inner: P,
    cache: Arc<ScoreCache>,
}

impl<P: Provider> CachedProvider<P> {
    pub fn new(inner: P, cache: Arc<ScoreCache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &Arc<ScoreCache> {
        &self.cache
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: Provider> Provider for CachedProvider<P> {
    fn backend(&self) -> BackendName {
        self.inner.backend()
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn score_method(&self) -> Option<ScoreMethod> {
        self.inner.score_method()
    }

    fn embed_image(&self, crop: &ImagePayload) -> Result<EmbeddingVector, ProviderError> {
        let backend = self.identity();
        let key = CacheKey::ImageEmbedding { backend: &backend, crop_digest: crop.digest() };
        if let Some(CachedValue::Vector { values }) = self.cache.get(&key) {
            return EmbeddingVector::normalized(values);
        }
        let v = self.inner.embed_image(crop)?;
        self.cache.insert(&key, CachedValue::Vector { values: v.values.clone() });
        Ok(v)
    }

    fn embed_text(&self, phrase: &str) -> Result<EmbeddingVector, ProviderError> {
        super::validate_phrase(phrase)?;
        let backend = self.identity();
        let key = CacheKey::TextEmbedding { backend: &backend, phrase };
        if let Some(CachedValue::Vector { values }) = self.cache.get(&key) {
            return EmbeddingVector::normalized(values);
        }
        let v = self.inner.embed_text(phrase)?;
        self.cache.insert(&key, CachedValue::Vector { values: v.values.clone() });
        Ok(v)
    }

    fn pair_score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError> {
        super::validate_phrase(phrase)?;
        let backend = self.identity();
        let key = CacheKey::PairScore { backend: &backend, crop_digest: crop.digest(), phrase };
        if let Some(CachedValue::Score { value, method }) = self.cache.get(&key) {
            return ProviderScore::new(value, method).map_err(|e| ProviderError::Decode(e.to_string()));
        }
        let s = self.inner.pair_score(crop, phrase)?;
        self.cache.insert(&key, CachedValue::Score { value: s.value, method: s.method });
        Ok(s)
    }

    fn generate_relation(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        request.validate()?;
        let backend = self.identity();
        let key = CacheKey::Generation {
            backend: &backend,
            crop_digest: request.image.digest(),
            prompt: &request.prompt_text,
            decode: request.decode,
        };
        if let Some(CachedValue::Text { text }) = self.cache.get(&key) {
            return Ok(text);
        }
        let t = self.inner.generate_relation(request)?;
        self.cache.insert(&key, CachedValue::Text { text: t.clone() });
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockProvider;

    fn crop(b: &[u8]) -> ImagePayload {
        ImagePayload::from_encoded(b.to_vec())
    }

    #[test]
    fn persist_reload_serves_without_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.cache");

        let first = CachedProvider::new(MockProvider::new(ScoreMethod::SigmoidProb), Arc::new(ScoreCache::new()));
        let s = first.pair_score(&crop(b"c1"), "cat on mat").unwrap();
        let e = first.embed_text("cat on mat").unwrap();
        assert_eq!(first.inner().calls(), 2);
        first.cache().store(&path).unwrap();

        let second = CachedProvider::new(MockProvider::new(ScoreMethod::SigmoidProb), Arc::new(ScoreCache::load(&path)));
        assert_eq!(second.pair_score(&crop(b"c1"), "cat on mat").unwrap(), s);
        assert_eq!(second.embed_text("cat on mat").unwrap(), e);
        assert_eq!(second.inner().calls(), 0);
        assert_eq!(second.cache().hits(), 2);

        // different phrase misses
        second.pair_score(&crop(b"c1"), "cat under mat").unwrap();
        assert_eq!(second.inner().calls(), 1);
    }

    #[test]
    fn backend_is_part_of_the_key() {
        let cache = Arc::new(ScoreCache::new());
        let a = CachedProvider::new(MockProvider::new(ScoreMethod::SigmoidProb), cache.clone());
        let b = CachedProvider::new(MockProvider::new(ScoreMethod::ItmProb), cache.clone());
        a.pair_score(&crop(b"c"), "x y z").unwrap();
        b.pair_score(&crop(b"c"), "x y z").unwrap();
        assert_eq!(b.inner().calls(), 1);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn store_load_preserves_entries_and_merges() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.log");
        let c1 = ScoreCache::new();
        c1.insert(&CacheKey::TextEmbedding { backend: "b", phrase: "p" }, CachedValue::Vector { values: vec![1.0, 0.0] });
        c1.store(&path).unwrap();
        let c2 = ScoreCache::new();
        c2.insert(&CacheKey::TextEmbedding { backend: "b", phrase: "q" }, CachedValue::Text { text: "t".into() });
        c2.store(&path).unwrap();
        let back = ScoreCache::load(&path);
        assert_eq!(back.len(), 2);
        let mut expected = c1.snapshot();
        expected.extend(c2.snapshot());
        assert_eq!(back.snapshot(), expected);
        // storing twice is byte-stable
        let before = fs::read(&path).unwrap();
        back.store(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);
    }

    #[test]
    fn corrupt_file_rebuilds_from_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.log");
        let c = ScoreCache::new();
        c.insert(&CacheKey::TextEmbedding { backend: "b", phrase: "p" }, CachedValue::Text { text: "t".into() });
        c.store(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x55;
        fs::write(&path, &bytes).unwrap();
        assert!(ScoreCache::load(&path).is_empty());
        fs::write(&path, b"garbage").unwrap();
        assert!(ScoreCache::load(&path).is_empty());
        assert!(ScoreCache::load(&dir.path().join("absent")).is_empty());
    }

    #[test]
    fn empty_cache_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.log");
        ScoreCache::new().store(&path).unwrap();
        assert!(ScoreCache::load(&path).is_empty());
        assert!(fs::read_to_string(&path).unwrap().starts_with(TRAILER_PREFIX));
    }
}
