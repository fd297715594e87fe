//! Scene-graph data model and its on-disk forms.
//!
//! The canonical file is line oriented: a header line carrying the schema
//! version and dataset name, then one JSON object per image. Readers for PSG
//! relation files and COCO instance annotations normalise into the same
//! in-memory representation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::geometry::BBox;

pub const SCHEMA_VERSION: u32 = 1;

pub type ObjectId = u64;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error{}: {message}", image_id.as_ref().map(|i| format!(" in image {i}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: usize,
        image_id: Option<String>,
        message: String,
    },
    #[error("image {image_id}: invalid {field}: {message}")]
    Validation {
        image_id: String,
        field: String,
        message: String,
    },
}

impl DatasetError {
    fn invalid(image_id: &str, field: impl Into<String>, message: impl Into<String>) -> Self {
        DatasetError::Validation {
            image_id: image_id.to_string(),
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Groundtruth,
    Predicted,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub label: String,
    pub bbox: BBox<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationInstance {
    #[serde(rename = "sub")]
    pub subject_id: ObjectId,
    #[serde(rename = "obj")]
    pub object_id: ObjectId,
    #[serde(rename = "pred")]
    pub predicate: String,
    #[serde(rename = "prov")]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RelationInstance {
    pub fn new(subject_id: ObjectId, object_id: ObjectId, predicate: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            subject_id,
            object_id,
            predicate: predicate.into(),
            provenance,
            score: None,
        }
    }

    fn sort_key(&self) -> (ObjectId, ObjectId, &str) {
        (self.subject_id, self.object_id, self.predicate.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub file_path: String,
    #[serde(default)]
    pub objects: Vec<ObjectInstance>,
    #[serde(default)]
    pub relations: Vec<RelationInstance>,
}

impl ImageRecord {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectInstance> {
        // objects are kept sorted by id once validated
        match self.objects.binary_search_by_key(&id, |o| o.id) {
            Ok(i) => Some(&self.objects[i]),
            Err(_) => self.objects.iter().find(|o| o.id == id),
        }
    }

    /// Normalises labels, clamps near-boundary boxes, checks referential
    /// integrity, drops repeated triplets and sorts into canonical order.
    pub fn normalized(mut self, clamp_tolerance_px: f64) -> Result<Self, DatasetError> {
        let id = self.image_id.clone();
        if id.is_empty() {
            return Err(DatasetError::invalid("<empty>", "image_id", "empty image id"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(DatasetError::invalid(
                &id,
                "width/height",
                format!("image size must be positive, got {}x{}", self.width, self.height),
            ));
        }
        let (iw, ih) = (self.width as f64, self.height as f64);

        let mut seen = HashSet::new();
        for obj in &mut self.objects {
            let field = format!("objects[id={}]", obj.id);
            if !seen.insert(obj.id) {
                return Err(DatasetError::invalid(&id, field, "duplicate object id"));
            }
            obj.label = normalize_label(&obj.label);
            if obj.label.is_empty() {
                return Err(DatasetError::invalid(&id, format!("{field}.label"), "empty class label"));
            }
            let b = obj.bbox;
            if !(b.x.is_finite() && b.y.is_finite() && b.w.is_finite() && b.h.is_finite()) {
                return Err(DatasetError::invalid(&id, format!("{field}.bbox"), "non-finite coordinate"));
            }
            if b.w <= 0.0 || b.h <= 0.0 {
                return Err(DatasetError::invalid(
                    &id,
                    format!("{field}.bbox"),
                    format!("non-positive box size {} x {}", b.w, b.h),
                ));
            }
            let overhang = (-b.x).max(-b.y).max(b.x1() - iw).max(b.y1() - ih);
            if overhang > clamp_tolerance_px {
                return Err(DatasetError::invalid(
                    &id,
                    format!("{field}.bbox"),
                    format!("box [{}, {}, {}, {}] exceeds the {}x{} image by {overhang} px", b.x, b.y, b.w, b.h, iw, ih),
                ));
            }
            let clamped = b.clamp_to(iw, ih);
            if clamped.w <= 0.0 || clamped.h <= 0.0 {
                return Err(DatasetError::invalid(&id, format!("{field}.bbox"), "box is empty after clamping"));
            }
            obj.bbox = clamped;
        }
        self.objects.sort_by_key(|o| o.id);

        let mut triplets = HashSet::new();
        let mut relations = Vec::with_capacity(self.relations.len());
        for (idx, mut rel) in std::mem::take(&mut self.relations).into_iter().enumerate() {
            let field = format!("relations[{idx}]");
            rel.predicate = normalize_label(&rel.predicate);
            if rel.predicate.is_empty() {
                return Err(DatasetError::invalid(&id, format!("{field}.pred"), "empty predicate"));
            }
            if rel.subject_id == rel.object_id {
                return Err(DatasetError::invalid(
                    &id,
                    field,
                    format!("subject and object are the same object {}", rel.subject_id),
                ));
            }
            for (role, oid) in [("sub", rel.subject_id), ("obj", rel.object_id)] {
                if !seen.contains(&oid) {
                    return Err(DatasetError::invalid(
                        &id,
                        format!("{field}.{role}"),
                        format!("references missing object {oid}"),
                    ));
                }
            }
            if let Some(s) = rel.score {
                if !s.is_finite() {
                    return Err(DatasetError::invalid(&id, format!("{field}.score"), "non-finite score"));
                }
            }
            if triplets.insert((rel.subject_id, rel.object_id, rel.predicate.clone())) {
                relations.push(rel);
            }
        }
        relations.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        self.relations = relations;
        Ok(self)
    }
}

/// Directed subject/object pair inside one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub image_id: String,
    #[serde(rename = "sub")]
    pub subject_id: ObjectId,
    #[serde(rename = "obj")]
    pub object_id: ObjectId,
}

impl PairKey {
    pub fn new(image_id: impl Into<String>, subject_id: ObjectId, object_id: ObjectId) -> Self {
        Self {
            image_id: image_id.into(),
            subject_id,
            object_id,
        }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}->{}", self.image_id, self.subject_id, self.object_id)
    }
}

/// A named, ordered collection of annotated images.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraphDataset {
    pub name: String,
    images: Vec<ImageRecord>,
    predicate_vocabulary: BTreeSet<String>,
}

impl SceneGraphDataset {
    pub fn new(name: impl Into<String>, images: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        Self::with_tolerance(name, images, DEFAULT_CLAMP_TOLERANCE_PX)
    }

    fn with_tolerance(name: impl Into<String>, images: Vec<ImageRecord>, tolerance: f64) -> Result<Self, DatasetError> {
        let mut out = Vec::with_capacity(images.len());
        let mut ids = HashSet::new();
        for img in images {
            let img = img.normalized(tolerance)?;
            if !ids.insert(img.image_id.clone()) {
                return Err(DatasetError::invalid(&img.image_id, "image_id", "duplicate image id"));
            }
            out.push(img);
        }
        out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let predicate_vocabulary = out
            .iter()
            .flat_map(|i| i.relations.iter().map(|r| r.predicate.clone()))
            .collect();
        Ok(Self {
            name: name.into(),
            images: out,
            predicate_vocabulary,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            images: Vec::new(),
            predicate_vocabulary: BTreeSet::new(),
        }
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn into_images(self) -> Vec<ImageRecord> {
        self.images
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images
            .binary_search_by(|i| i.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn predicate_vocabulary(&self) -> &BTreeSet<String> {
        &self.predicate_vocabulary
    }

    pub fn relation_count(&self) -> usize {
        self.images.iter().map(|i| i.relations.len()).sum()
    }

    pub fn object_count(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }
}

/// Lowercase, underscores to spaces, single-space separated.
pub fn normalize_label(s: &str) -> String {
    s.replace('_', " ")
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Predicates by descending count, ties in lexicographic order.
pub fn predicate_histogram(dataset: &SceneGraphDataset) -> Vec<(String, u64)> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for img in dataset.images() {
        for rel in &img.relations {
            *counts.entry(rel.predicate.as_str()).or_default() += 1;
        }
    }
    let mut hist: Vec<(String, u64)> = counts.into_iter().map(|(p, c)| (p.to_string(), c)).collect();
    // BTreeMap iteration is already lexicographic; a stable sort keeps it for ties
    hist.sort_by(|a, b| b.1.cmp(&a.1));
    hist
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Canonical,
    PsgJson,
    CocoBoxes,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" => Ok(Self::Canonical),
            "psg" | "psg_json" => Ok(Self::PsgJson),
            "coco" | "coco_boxes" => Ok(Self::CocoBoxes),
            other => Err(format!("unknown dataset format '{other}' (expected canonical, psg_json or coco_boxes)")),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Canonical => "canonical",
            Self::PsgJson => "psg_json",
            Self::CocoBoxes => "coco_boxes",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PsgSplit {
    #[default]
    All,
    Train,
    Test,
}

pub const DEFAULT_CLAMP_TOLERANCE_PX: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: DatasetFormat,
    /// Boxes overhanging the image by at most this many pixels are clipped;
    /// larger overhangs are rejected.
    pub clamp_tolerance_px: f64,
    pub psg_split: PsgSplit,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: DatasetFormat::Canonical,
            clamp_tolerance_px: DEFAULT_CLAMP_TOLERANCE_PX,
            psg_split: PsgSplit::All,
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<SceneGraphDataset, DatasetError> {
    load_dataset_with(path, &LoadOptions { format, ..Default::default() })
}

pub fn load_dataset_with(path: &Path, opts: &LoadOptions) -> Result<SceneGraphDataset, DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    match opts.format {
        DatasetFormat::Canonical => read_canonical(path, reader, opts.clamp_tolerance_px),
        DatasetFormat::PsgJson => read_psg(path, reader, opts),
        DatasetFormat::CocoBoxes => read_coco(path, reader, opts),
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    name: String,
}

fn read_canonical(path: &Path, reader: impl BufRead, tolerance: f64) -> Result<SceneGraphDataset, DatasetError> {
    let parse_err = |line: usize, image_id: Option<String>, message: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        image_id,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(parse_err(1, None, "missing header line".into())),
            Some((n, line)) => {
                let line = line.map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| parse_err(n + 1, None, format!("bad header: {e}")))?;
            }
        }
    };
    if header.schema_version != SCHEMA_VERSION {
        return Err(parse_err(
            1,
            None,
            format!("unsupported schema version {} (expected {SCHEMA_VERSION})", header.schema_version),
        ));
    }
    let mut images = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line).map_err(|e| {
            let image_id = serde_json::from_str::<Value>(&line)
                .ok()
                .and_then(|v| v.get("image_id").map(value_to_id));
            parse_err(n + 1, image_id, e.to_string())
        })?;
        images.push(record);
    }
    SceneGraphDataset::with_tolerance(header.name, images, tolerance)
}

/// Writes the canonical line format. Output is byte-stable for a given dataset.
pub fn save_dataset(dataset: &SceneGraphDataset, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_canonical(dataset, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn write_canonical(dataset: &SceneGraphDataset, w: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        name: dataset.name.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for img in dataset.images() {
        serde_json::to_writer(&mut *w, img)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn value_to_id(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Deserialize)]
struct PsgFile {
    data: Vec<PsgImage>,
    #[serde(default)]
    thing_classes: Vec<String>,
    #[serde(default)]
    stuff_classes: Vec<String>,
    predicate_classes: Vec<String>,
    #[serde(default)]
    train_image_ids: Vec<Value>,
    #[serde(default)]
    test_image_ids: Vec<Value>,
}

#[derive(Deserialize)]
struct PsgImage {
    file_name: String,
    height: u32,
    width: u32,
    image_id: Value,
    #[serde(default)]
    annotations: Vec<PsgAnnotation>,
    #[serde(default)]
    segments_info: Vec<PsgSegment>,
    #[serde(default)]
    relations: Vec<[usize; 3]>,
    #[serde(default)]
    pan_seg_file_name: Option<String>,
}

#[derive(Deserialize)]
struct PsgAnnotation {
    bbox: [f64; 4],
    /// 0 = absolute corners, 1 = absolute x/y/width/height
    #[serde(default)]
    bbox_mode: u32,
    category_id: usize,
}

#[derive(Deserialize)]
struct PsgSegment {
    id: Value,
}

fn read_psg(path: &Path, reader: impl BufRead, opts: &LoadOptions) -> Result<SceneGraphDataset, DatasetError> {
    let file: PsgFile = serde_json::from_reader(reader).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        image_id: None,
        message: e.to_string(),
    })?;
    let classes: Vec<&String> = file.thing_classes.iter().chain(file.stuff_classes.iter()).collect();
    let split: Option<HashSet<String>> = match opts.psg_split {
        PsgSplit::All => None,
        PsgSplit::Train => Some(file.train_image_ids.iter().map(value_to_id).collect()),
        PsgSplit::Test => Some(file.test_image_ids.iter().map(value_to_id).collect()),
    };

    let mut images = Vec::new();
    for img in file.data {
        let image_id = value_to_id(&img.image_id);
        if split.as_ref().is_some_and(|s| !s.contains(&image_id)) {
            continue;
        }
        let mut objects = Vec::with_capacity(img.annotations.len());
        for (idx, ann) in img.annotations.iter().enumerate() {
            let label = classes.get(ann.category_id).ok_or_else(|| {
                DatasetError::invalid(
                    &image_id,
                    format!("annotations[{idx}].category_id"),
                    format!("category {} out of range", ann.category_id),
                )
            })?;
            let [a, b, c, d] = ann.bbox;
            let bbox = match ann.bbox_mode {
                0 => BBox::from_corners(a, b, c, d),
                1 => BBox { x: a, y: b, w: c, h: d },
                m => {
                    return Err(DatasetError::invalid(
                        &image_id,
                        format!("annotations[{idx}].bbox_mode"),
                        format!("unsupported box mode {m}"),
                    ))
                }
            };
            let mask_ref = match (&img.pan_seg_file_name, img.segments_info.get(idx)) {
                (Some(f), Some(seg)) => Some(format!("{f}#{}", value_to_id(&seg.id))),
                _ => None,
            };
            objects.push(ObjectInstance {
                id: idx as ObjectId,
                label: label.to_string(),
                bbox,
                mask_ref,
            });
        }
        let mut relations = Vec::with_capacity(img.relations.len());
        for (idx, [s, o, p]) in img.relations.iter().copied().enumerate() {
            let predicate = file.predicate_classes.get(p).ok_or_else(|| {
                DatasetError::invalid(&image_id, format!("relations[{idx}].pred"), format!("predicate index {p} out of range"))
            })?;
            relations.push(RelationInstance::new(s as ObjectId, o as ObjectId, predicate.clone(), Provenance::Groundtruth));
        }
        images.push(ImageRecord {
            image_id,
            width: img.width,
            height: img.height,
            file_path: img.file_name,
            objects,
            relations,
        });
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    SceneGraphDataset::with_tolerance(name, images, opts.clamp_tolerance_px)
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: Value,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: Value,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

fn read_coco(path: &Path, reader: impl BufRead, opts: &LoadOptions) -> Result<SceneGraphDataset, DatasetError> {
    let file: CocoFile = serde_json::from_reader(reader).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        image_id: None,
        message: e.to_string(),
    })?;
    let categories: BTreeMap<u64, &str> = file.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut images: BTreeMap<String, ImageRecord> = file
        .images
        .into_iter()
        .map(|img| {
            let image_id = value_to_id(&img.id);
            (
                image_id.clone(),
                ImageRecord {
                    image_id,
                    width: img.width,
                    height: img.height,
                    file_path: img.file_name,
                    objects: Vec::new(),
                    relations: Vec::new(),
                },
            )
        })
        .collect();
    for ann in file.annotations {
        // crowd regions are not single objects
        if ann.iscrowd != 0 {
            continue;
        }
        let image_id = value_to_id(&ann.image_id);
        let img = images.get_mut(&image_id).ok_or_else(|| {
            DatasetError::invalid(&image_id, format!("annotation {}", ann.id), "references an unknown image")
        })?;
        let label = categories.get(&ann.category_id).ok_or_else(|| {
            DatasetError::invalid(
                &image_id,
                format!("annotation {}.category_id", ann.id),
                format!("unknown category {}", ann.category_id),
            )
        })?;
        let [x, y, w, h] = ann.bbox;
        img.objects.push(ObjectInstance {
            id: ann.id,
            label: label.to_string(),
            bbox: BBox { x, y, w, h },
            mask_ref: None,
        });
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    SceneGraphDataset::with_tolerance(name, images.into_values().collect(), opts.clamp_tolerance_px)
}
