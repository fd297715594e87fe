use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use image::RgbaImage;

use super::{clamped_cosine, MetricError, ProviderScore, ScoreMethod};
use crate::geometry::{BBox, RegionCropSpec};
use crate::imaging::{self, ImagingError};
use crate::providers::{ImagePayload, Provider, ProviderError};

/// Renders a triplet through a template with `{subject}`, `{predicate}` and
/// `{object}` placeholders.
pub fn triplet_text(template: &str, subject: &str, predicate: &str, object: &str) -> String {
    template
        .replace("{subject}", subject)
        .replace("{predicate}", predicate)
        .replace("{object}", object)
}

/// Crops the expanded union of two boxes out of a loaded image and encodes it.
pub fn region_crop(
    image_id: &str,
    img: &RgbaImage,
    subject: &BBox<f64>,
    object: &BBox<f64>,
    expansion: f64,
) -> Result<(RegionCropSpec<f64>, ImagePayload), ImagingError> {
    let spec = RegionCropSpec::new(image_id, *subject, *object, expansion, img.width(), img.height());
    let payload = imaging::encode_png(&imaging::crop(img, &spec.crop_box))?;
    Ok((spec, payload))
}

type Memo = Mutex<HashMap<String, Arc<Vec<f64>>>>;

/// Scores (crop, phrase) pairs against one backend. Embeddings are memoised
/// per scorer, so repeated phrases and crops cost one backend call each.
pub struct RegionScorer<'a, P: Provider + ?Sized> {
    provider: &'a P,
    method: ScoreMethod,
    texts: Memo,
    images: Memo,
}

impl<'a, P: Provider + ?Sized> RegionScorer<'a, P> {
    pub fn new(provider: &'a P) -> Result<Self, MetricError> {
        let method = provider.score_method().ok_or_else(|| MetricError::Provider {
            region: provider.identity(),
            source: ProviderError::Unsupported {
                backend: provider.identity(),
                operation: "region scoring",
            },
        })?;
        Ok(Self {
            provider,
            method,
            texts: Mutex::default(),
            images: Mutex::default(),
        })
    }

    pub fn method(&self) -> ScoreMethod {
        self.method
    }

    pub fn provider(&self) -> &P {
        self.provider
    }

    fn memo(
        memo: &Memo,
        key: &str,
        fetch: impl FnOnce() -> Result<Vec<f64>, ProviderError>,
    ) -> Result<Arc<Vec<f64>>, ProviderError> {
        if let Some(v) = memo.lock().unwrap_or_else(|e| e.into_inner()).get(key) {
            return Ok(v.clone());
        }
        let v = Arc::new(fetch()?);
        memo.lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key.to_string(), v.clone());
        Ok(v)
    }

    pub fn text_embedding(&self, phrase: &str) -> Result<Arc<Vec<f64>>, ProviderError> {
        Self::memo(&self.texts, phrase, || Ok(self.provider.embed_text(phrase)?.as_f64()))
    }

    fn image_embedding(&self, crop: &ImagePayload) -> Result<Arc<Vec<f64>>, ProviderError> {
        Self::memo(&self.images, crop.digest(), || Ok(self.provider.embed_image(crop)?.as_f64()))
    }

    pub fn score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError> {
        if self.method.is_cosine() {
            let img = self.image_embedding(crop)?;
            let txt = self.text_embedding(phrase)?;
            if img.len() != txt.len() {
                return Err(ProviderError::Decode(format!(
                    "image embedding has {} dims, text embedding {}",
                    img.len(),
                    txt.len()
                )));
            }
            Ok(ProviderScore::from_embeddings(&img, &txt))
        } else {
            let s = self.provider.pair_score(crop, phrase)?;
            if s.method != self.method {
                log::debug!("backend reported {} while {} was expected", s.method, self.method);
            }
            Ok(s)
        }
    }

    /// Clamped cosine between two phrases, or `None` when the backend has no
    /// text encoder.
    pub fn text_similarity(&self, a: &str, b: &str) -> Result<Option<f64>, ProviderError> {
        let ea = match self.text_embedding(a) {
            Ok(v) => v,
            Err(ProviderError::Unsupported { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let eb = self.text_embedding(b)?;
        if ea.len() != eb.len() {
            return Err(ProviderError::Decode("text embeddings differ in dimension".into()));
        }
        Ok(Some(clamped_cosine(&ea, &eb)))
    }
}

/// One-shot region score without memoisation.
pub fn region_score<P: Provider + ?Sized>(
    provider: &P,
    crop: &ImagePayload,
    phrase: &str,
) -> Result<ProviderScore<f64>, MetricError> {
    RegionScorer::new(provider)?
        .score(crop, phrase)
        .map_err(|source| MetricError::Provider {
            region: crop.digest().to_string(),
            source,
        })
}
