//! Synthetic relation generation: sample overlapping object pairs, prompt a
//! VLM about each and keep the answers that survive filtering.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::filter::{postprocess, Blocklist, GenerationStatus, DEFAULT_BLOCKLIST, DEFAULT_MAX_WORDS};
use super::prompt::{build_prompt, load_mask_pair, OverlaySpec, RenderedPrompt, DEFAULT_PROMPT_TEMPLATE};
use super::PipelineError;
use crate::geometry::iou;
use crate::imaging::ImageStore;
use crate::metrics::par_map;
use crate::model::{ImageRecord, ObjectId, PairKey, Provenance, RelationInstance, SceneGraphDataset};
use crate::providers::{DecodeParams, GenerationRequest, Provider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub seed: u64,
    /// Share of the overlapping directed pairs prompted per image.
    pub sampling_fraction: f64,
    /// Upper bound on prompts per image; `None` for no bound.
    pub cap: Option<usize>,
    pub max_words: usize,
    /// Used unless `blocklist_path` is set.
    pub blocklist: Vec<String>,
    pub blocklist_path: Option<PathBuf>,
    pub prompt_template: String,
    pub overlay: OverlaySpec,
    pub crop_expansion: f64,
    pub decode: DecodeParams,
    /// Images prompted concurrently.
    pub max_parallel: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sampling_fraction: 0.5,
            cap: Some(50),
            max_words: DEFAULT_MAX_WORDS,
            blocklist: DEFAULT_BLOCKLIST.iter().map(|s| s.to_string()).collect(),
            blocklist_path: None,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            overlay: OverlaySpec::default(),
            crop_expansion: 0.2,
            decode: DecodeParams::default(),
            max_parallel: 8,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction <= 1.0) {
            return bad("sampling_fraction must lie in (0, 1]");
        }
        if self.cap == Some(0) {
            return bad("cap must be positive");
        }
        if self.max_words == 0 {
            return bad("max_words must be positive");
        }
        if self.prompt_template.trim().is_empty() {
            return bad("prompt_template is empty");
        }
        if !(self.crop_expansion >= 0.0) {
            return bad("crop_expansion must be non-negative");
        }
        if !(self.decode.temperature >= 0.0) || self.decode.max_tokens == 0 {
            return bad("decode needs temperature >= 0 and max_tokens > 0");
        }
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1");
        }
        self.overlay.validate()
    }

    pub fn load_blocklist(&self) -> Result<Blocklist, PipelineError> {
        match &self.blocklist_path {
            Some(p) => Blocklist::load(p),
            None => Ok(Blocklist::new(&self.blocklist)),
        }
    }
}

fn image_seed(seed: u64, image_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    h.finalize().into()
}

/// Directed pairs of overlapping objects to prompt for one image. Both
/// directions of each overlapping pair are candidates and are sampled
/// independently; the result is sorted.
pub fn select_candidate_pairs(
    image: &ImageRecord,
    sampling_fraction: f64,
    cap: Option<usize>,
    seed: u64,
) -> Vec<(ObjectId, ObjectId)> {
    let objs = &image.objects;
    let mut pool = Vec::new();
    for (i, a) in objs.iter().enumerate() {
        for b in &objs[i + 1..] {
            if iou(&a.bbox, &b.bbox) > 0.0 {
                pool.push((a.id, b.id));
                pool.push((b.id, a.id));
            }
        }
    }
    pool.sort();
    if pool.is_empty() {
        return pool;
    }
    let want = ((sampling_fraction.clamp(0.0, 1.0) * pool.len() as f64).ceil() as usize).min(pool.len());
    let mut rng = ChaCha8Rng::from_seed(image_seed(seed, &image.image_id));
    let mut picked: Vec<(ObjectId, ObjectId)> = rand::seq::index::sample(&mut rng, pool.len(), want)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    if let Some(cap) = cap {
        picked.truncate(cap);
    }
    picked.sort();
    picked
}

/// One prompted pair and what became of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    #[serde(flatten)]
    pub pair_key: PairKey,
    pub prompt_digest: String,
    /// Digest of the prompt image, `sha256:<hex>`.
    pub prompt_artifact_ref: String,
    pub raw_text: String,
    pub predicate: Option<String>,
    pub status: GenerationStatus,
    pub backend_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationRecord {
    fn resume_key(&self) -> ResumeKey {
        (
            self.pair_key.clone(),
            self.backend_name.clone(),
            self.prompt_digest.clone(),
        )
    }
}

type ResumeKey = (PairKey, String, String);

/// Append-only JSON-lines log of generation attempts.
pub struct Ledger {
    path: PathBuf,
    file: File,
    done: BTreeMap<ResumeKey, GenerationRecord>,
}

impl Ledger {
    /// Starts a new ledger. Refuses to overwrite a non-empty file.
    pub fn create(path: &Path) -> Result<Self, PipelineError> {
        if std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false) {
            return Err(PipelineError::LedgerExists(path.to_path_buf()));
        }
        let file = File::create(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            done: BTreeMap::new(),
        })
    }

    /// Reopens a ledger for appending, remembering every recorded attempt.
    /// A torn final line from an interrupted write is cut off.
    pub fn resume(path: &Path) -> Result<Self, PipelineError> {
        let io = |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if keep < bytes.len() {
            log::warn!(
                "{}: dropping {} bytes of an unfinished record",
                path.display(),
                bytes.len() - keep
            );
            file.set_len(keep as u64).map_err(io)?;
        }
        let mut done = BTreeMap::new();
        for (i, line) in BufReader::new(&bytes[..keep]).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GenerationRecord = serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            done.insert(rec.resume_key(), rec);
        }
        file.seek(SeekFrom::End(0)).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            done,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    fn lookup(&self, key: &ResumeKey) -> Option<&GenerationRecord> {
        self.done.get(key)
    }

    fn append(&mut self, records: &[GenerationRecord]) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("records serialise");
            buf.push(b'\n');
        }
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.flush())
            .map_err(|source| PipelineError::Io {
                path: self.path.clone(),
                source,
            })?;
        for r in records {
            self.done.insert(r.resume_key(), r.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub images: usize,
    pub attempted: usize,
    /// Attempts answered from the ledger instead of the backend.
    pub reused: usize,
    pub by_status: BTreeMap<String, usize>,
}

pub struct GenerationOutcome {
    pub dataset: SceneGraphDataset,
    pub summary: GenerationSummary,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunLimits {
    /// Stop after this many images have been written to the ledger.
    pub max_images: Option<usize>,
}

struct ImageAttempts {
    records: Vec<GenerationRecord>,
    fresh: Vec<bool>,
}

/// Prompts every sampled pair of every image and assembles a dataset of the
/// accepted relations. Attempts already in `ledger` are not repeated; new ones
/// are appended image by image in dataset order.
pub fn generate_dataset<P: Provider + ?Sized>(
    images: &SceneGraphDataset,
    store: &ImageStore,
    vlm: &P,
    config: &GenerationConfig,
    ledger: &mut Ledger,
    limits: RunLimits,
) -> Result<GenerationOutcome, PipelineError> {
    config.validate()?;
    let blocklist = config.load_blocklist()?;
    let backend = vlm.identity();
    let mut out_images = Vec::new();
    let mut summary = GenerationSummary::default();
    let todo = match limits.max_images {
        Some(n) => &images.images()[..n.min(images.images().len())],
        None => images.images(),
    };

    for chunk in todo.chunks(config.max_parallel) {
        let done = &*ledger;
        let batch = par_map(config.max_parallel, chunk, |img| {
            attempt_image(img, store, vlm, &backend, config, &blocklist, done)
        })?;
        for (img, attempts) in chunk.iter().zip(batch) {
            let fresh: Vec<GenerationRecord> = attempts
                .records
                .iter()
                .zip(&attempts.fresh)
                .filter(|(_, f)| **f)
                .map(|(r, _)| r.clone())
                .collect();
            ledger.append(&fresh)?;
            summary.images += 1;
            summary.attempted += attempts.records.len();
            summary.reused += attempts.records.len() - fresh.len();
            for r in &attempts.records {
                *summary.by_status.entry(r.status.to_string()).or_default() += 1;
            }
            out_images.push(assemble(img, &attempts.records)?);
        }
    }
    let dataset = SceneGraphDataset::new(format!("{}-generated", images.name), out_images)?;
    Ok(GenerationOutcome { dataset, summary })
}

fn attempt_image<P: Provider + ?Sized>(
    img: &ImageRecord,
    store: &ImageStore,
    vlm: &P,
    backend: &str,
    config: &GenerationConfig,
    blocklist: &Blocklist,
    ledger: &Ledger,
) -> Result<ImageAttempts, PipelineError> {
    let pairs = select_candidate_pairs(img, config.sampling_fraction, config.cap, config.seed);
    let mut attempts = ImageAttempts {
        records: Vec::with_capacity(pairs.len()),
        fresh: Vec::with_capacity(pairs.len()),
    };
    if pairs.is_empty() {
        return Ok(attempts);
    }
    let pixels = store.load(img)?;
    for (s, o) in pairs {
        let prompt = render(store, img, &pixels, s, o, config)?;
        let key = PairKey::new(img.image_id.clone(), s, o);
        let digest = prompt.artifact.digest();
        if let Some(prev) = ledger.lookup(&(key.clone(), backend.to_string(), digest.clone())) {
            attempts.records.push(prev.clone());
            attempts.fresh.push(false);
            continue;
        }
        let request = GenerationRequest {
            image: prompt.image,
            prompt_text: prompt.artifact.prompt_text,
            decode: config.decode,
        };
        let mut record = GenerationRecord {
            pair_key: key,
            prompt_digest: digest,
            prompt_artifact_ref: format!("sha256:{}", prompt.artifact.image_digest),
            raw_text: String::new(),
            predicate: None,
            status: GenerationStatus::ProviderError,
            backend_name: backend.to_string(),
            error: None,
        };
        match vlm.generate_relation(&request) {
            Ok(text) => {
                let filtered = postprocess(&text, blocklist, config.max_words);
                record.raw_text = text;
                record.status = filtered.status;
                record.predicate = filtered.predicate;
            }
            Err(e) => {
                log::warn!("{}: {e}", record.pair_key);
                record.error = Some(e.to_string());
            }
        }
        attempts.records.push(record);
        attempts.fresh.push(true);
    }
    Ok(attempts)
}

fn render(
    store: &ImageStore,
    img: &ImageRecord,
    pixels: &image::RgbaImage,
    s: ObjectId,
    o: ObjectId,
    config: &GenerationConfig,
) -> Result<RenderedPrompt, PipelineError> {
    let masks = load_mask_pair(store, img, s, o);
    build_prompt(
        pixels,
        img,
        s,
        o,
        masks.as_ref().map(|(a, b)| (a, b)),
        &config.prompt_template,
        &config.overlay,
        config.crop_expansion,
    )
}

fn assemble(img: &ImageRecord, records: &[GenerationRecord]) -> Result<ImageRecord, PipelineError> {
    let relations = records
        .iter()
        .filter(|r| r.status == GenerationStatus::Accepted)
        .filter_map(|r| {
            r.predicate.as_ref().map(|p| {
                RelationInstance::new(r.pair_key.subject_id, r.pair_key.object_id, p.clone(), Provenance::Generated)
            })
        })
        .collect();
    let out = ImageRecord {
        relations,
        ..img.clone()
    };
    Ok(out.normalized(0.0)?)
}

/// Writes each prompt image and its description to `dir` without calling any
/// backend. Returns the number of prompts rendered.
pub fn render_prompts(
    images: &SceneGraphDataset,
    store: &ImageStore,
    config: &GenerationConfig,
    dir: &Path,
) -> Result<usize, PipelineError> {
    config.validate()?;
    let io = |path: &Path, source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut count = 0;
    for img in images.images() {
        let pairs = select_candidate_pairs(img, config.sampling_fraction, config.cap, config.seed);
        if pairs.is_empty() {
            continue;
        }
        let pixels = store.load(img)?;
        for (s, o) in pairs {
            let prompt = render(store, img, &pixels, s, o, config)?;
            let stem = format!("{}__{s}_{o}", sanitize(&img.image_id));
            let png = dir.join(format!("{stem}.png"));
            std::fs::write(&png, prompt.image.bytes()).map_err(|e| io(&png, e))?;
            let meta = dir.join(format!("{stem}.json"));
            let body = serde_json::to_vec_pretty(&prompt.artifact).expect("artifact serialises");
            std::fs::write(&meta, body).map_err(|e| io(&meta, e))?;
            count += 1;
        }
    }
    Ok(count)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}
