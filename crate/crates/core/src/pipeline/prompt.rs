//! Set-of-mark region prompts: the queried objects are painted in distinct
//! colours, the image is cropped to their expanded union and the question
//! refers to them as "Object 1" and "Object 2".

use image::{GrayImage, RgbaImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::geometry::RegionCropSpec;
use crate::imaging::{self, ImageStore};
use crate::model::{ImageRecord, ObjectId};
use crate::providers::ImagePayload;

pub const SUBJECT_ALIAS: &str = "Object 1";
pub const OBJECT_ALIAS: &str = "Object 2";

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Object 1 (the {subject}, marked in blue) and Object 2 (the {object}, marked in red) \
are highlighted in this image. What is the most specific relation from Object 1 to Object 2? \
Answer with the relation phrase only, in at most five words. \
Avoid vague spatial words such as \"next to\", \"near\" or \"with\".";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlaySpec {
    pub subject_color: [u8; 4],
    pub object_color: [u8; 4],
    /// Opacity of the fill, scaled by each colour's own alpha channel.
    pub alpha: f64,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        Self {
            subject_color: [0, 0, 255, 255],
            object_color: [255, 0, 0, 255],
            alpha: 0.45,
        }
    }
}

impl OverlaySpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.subject_color == self.object_color {
            return Err(PipelineError::InvalidConfig(
                "subject and object overlays must use different colours".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(PipelineError::InvalidConfig("overlay alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn effective(&self, color: [u8; 4]) -> ([u8; 3], f32) {
        ([color[0], color[1], color[2]], (self.alpha * color[3] as f64 / 255.0) as f32)
    }
}

/// Everything needed to reproduce a prompt; the pixels travel separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptArtifact {
    pub crop: RegionCropSpec<f64>,
    pub overlay_spec: OverlaySpec,
    pub prompt_text: String,
    pub subject_alias: String,
    pub object_alias: String,
    pub masks_used: bool,
    /// Digest of the encoded prompt image.
    pub image_digest: String,
}

impl PromptArtifact {
    /// Identifies the prompt for resumption: text and pixels together.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prompt_text.as_bytes());
        h.update([0u8]);
        h.update(self.image_digest.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub artifact: PromptArtifact,
    pub image: ImagePayload,
}

/// Fills `{subject}`, `{object}`, `{subject_alias}` and `{object_alias}`.
pub fn render_template(template: &str, subject_label: &str, object_label: &str) -> String {
    template
        .replace("{subject_alias}", SUBJECT_ALIAS)
        .replace("{object_alias}", OBJECT_ALIAS)
        .replace("{subject}", subject_label)
        .replace("{object}", object_label)
}

/// Renders the prompt for `subject_id -> object_id` on already loaded pixels.
/// Masks, when given, replace the box fills.
#[allow(clippy::too_many_arguments)]
pub fn build_prompt(
    pixels: &RgbaImage,
    record: &ImageRecord,
    subject_id: ObjectId,
    object_id: ObjectId,
    masks: Option<(&GrayImage, &GrayImage)>,
    template: &str,
    overlay: &OverlaySpec,
    expansion: f64,
) -> Result<RenderedPrompt, PipelineError> {
    if subject_id == object_id {
        return Err(PipelineError::Precondition(format!(
            "subject and object are the same object ({subject_id}) in image {}",
            record.image_id
        )));
    }
    let find = |id| {
        record.object(id).ok_or_else(|| {
            PipelineError::Precondition(format!("object {id} is not in image {}", record.image_id))
        })
    };
    let (s, o) = (find(subject_id)?, find(object_id)?);
    overlay.validate()?;

    let mut canvas = pixels.clone();
    let (sc, sa) = overlay.effective(overlay.subject_color);
    let (oc, oa) = overlay.effective(overlay.object_color);
    match masks {
        Some((sm, om)) => {
            imaging::fill_mask(&mut canvas, sm, sc, sa);
            imaging::fill_mask(&mut canvas, om, oc, oa);
        }
        None => {
            imaging::fill_box(&mut canvas, &s.bbox, sc, sa);
            imaging::fill_box(&mut canvas, &o.bbox, oc, oa);
        }
    }
    let crop = RegionCropSpec::new(
        record.image_id.clone(),
        s.bbox,
        o.bbox,
        expansion,
        pixels.width(),
        pixels.height(),
    );
    let clipped = |b: &crate::geometry::BBox<f64>| b.clamp_to(pixels.width() as f64, pixels.height() as f64);
    assert!(
        crop.crop_box.contains(&clipped(&s.bbox)) && crop.crop_box.contains(&clipped(&o.bbox)),
        "crop must contain both objects"
    );
    let image = imaging::encode_png(&imaging::crop(&canvas, &crop.crop_box))?;
    let artifact = PromptArtifact {
        crop,
        overlay_spec: overlay.clone(),
        prompt_text: render_template(template, &s.label, &o.label),
        subject_alias: SUBJECT_ALIAS.to_string(),
        object_alias: OBJECT_ALIAS.to_string(),
        masks_used: masks.is_some(),
        image_digest: image.digest().to_string(),
    };
    Ok(RenderedPrompt { artifact, image })
}

/// Loads both objects' masks when each has a reference. Any failure falls
/// back to box overlays with a warning.
pub fn load_mask_pair(
    store: &ImageStore,
    record: &ImageRecord,
    subject_id: ObjectId,
    object_id: ObjectId,
) -> Option<(GrayImage, GrayImage)> {
    let s = record.object(subject_id)?.mask_ref.as_deref()?;
    let o = record.object(object_id)?.mask_ref.as_deref()?;
    let load = |r| store.load_mask(r, record.width, record.height);
    match (load(s), load(o)) {
        (Ok(a), Ok(b)) => Some((a, b)),
        (Err(e), _) | (_, Err(e)) => {
            log::warn!("image {}: {e}; using box overlays", record.image_id);
            None
        }
    }
}
