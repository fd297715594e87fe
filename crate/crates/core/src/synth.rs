//! Seeded synthetic scene graphs with matching noise images, for tests and
//! demos that must run without real data.

use std::path::Path;

use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::imaging::{ImageStore, ImagingError};
use crate::model::{ImageRecord, ObjectInstance, Provenance, RelationInstance, SceneGraphDataset};

pub const SYNTH_LABELS: &[&str] = &["person", "horse", "dog", "table", "cup", "car", "bench", "tree"];
pub const SYNTH_PREDICATES: &[&str] = &[
    "riding",
    "holding",
    "sitting on",
    "standing on",
    "looking at",
    "in front of",
    "behind",
    "on top of",
    "carrying",
    "under",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub images: usize,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub relations_per_image: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            images: 10,
            seed: 0,
            width: 96,
            height: 72,
            min_objects: 3,
            max_objects: 8,
            relations_per_image: 4,
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BBox<f64> {
    let (wf, hf) = (w as f64, h as f64);
    // a third small objects, the rest medium to large
    let (lo, hi) = if rng.random_bool(1.0 / 3.0) { (0.05, 0.12) } else { (0.2, 0.5) };
    let bw = (wf * rng.random_range(lo..hi)).round().max(1.0);
    let bh = (hf * rng.random_range(lo..hi)).round().max(1.0);
    let x = rng.random_range(0.0..=(wf - bw)).round();
    let y = rng.random_range(0.0..=(hf - bh)).round();
    BBox { x, y, w: bw, h: bh }
}

/// Builds `spec.images` images named `synth-00000`, ... with files under
/// `images/`.
pub fn synthetic_dataset(spec: &SynthSpec) -> SceneGraphDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lo = spec.min_objects.max(1);
    let hi = spec.max_objects.max(lo);
    let mut images = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let image_id = format!("synth-{i:05}");
        let n = rng.random_range(lo..=hi);
        let objects: Vec<ObjectInstance> = (0..n)
            .map(|j| ObjectInstance {
                id: j as u64 + 1,
                label: SYNTH_LABELS[rng.random_range(0..SYNTH_LABELS.len())].to_string(),
                bbox: random_box(&mut rng, spec.width, spec.height),
                mask_ref: None,
            })
            .collect();
        let ordered = n * n.saturating_sub(1);
        let want = spec.relations_per_image.min(ordered);
        let relations = rand::seq::index::sample(&mut rng, ordered.max(1), want)
            .into_iter()
            .map(|k| {
                let s = k / (n - 1);
                let mut o = k % (n - 1);
                if o >= s {
                    o += 1;
                }
                let p = SYNTH_PREDICATES[rng.random_range(0..SYNTH_PREDICATES.len())];
                RelationInstance::new(s as u64 + 1, o as u64 + 1, p, Provenance::Groundtruth)
            })
            .collect();
        let record = ImageRecord {
            file_path: format!("images/{image_id}.png"),
            image_id,
            width: spec.width,
            height: spec.height,
            objects,
            relations,
        };
        images.push(record.normalized(0.0).expect("synthetic records are valid"));
    }
    SceneGraphDataset::new(format!("synthetic-{}", spec.seed), images).expect("synthetic ids are unique")
}

/// Noise texture unique to the image id.
pub fn render_noise(record: &ImageRecord) -> RgbaImage {
    let mut seed = [0u8; 32];
    for (i, b) in record.image_id.bytes().enumerate() {
        seed[i % 32] ^= b.rotate_left(i as u32 / 32);
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    RgbaImage::from_fn(record.width, record.height, |_, _| {
        Rgba([rng.random(), rng.random(), rng.random(), 255])
    })
}

/// Writes the noise image of every record under `root`.
pub fn write_images(dataset: &SceneGraphDataset, root: &Path) -> Result<(), ImagingError> {
    let store = ImageStore::new(root);
    for r in dataset.images() {
        let path = store.resolve(&r.file_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ImagingError::Unreadable {
                path: parent.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        render_noise(r)
            .save(&path)
            .map_err(|e| ImagingError::Encode(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
