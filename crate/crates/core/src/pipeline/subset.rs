//! Pair subsets for ablations: box-size ratio, overlap and distance.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geometry::{iou, separation, size_ratio};
use crate::model::{PairKey, SceneGraphDataset};

pub const DEFAULT_SUBSET_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    /// Smaller box area over larger below the threshold.
    RatioLow,
    RatioHigh,
    /// Boxes overlap (IoU > 0).
    Intersecting,
    /// Disjoint boxes at least `threshold` of the longer image side apart.
    Distant,
}

impl SubsetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsetKind::RatioLow => "ratio_low",
            SubsetKind::RatioHigh => "ratio_high",
            SubsetKind::Intersecting => "intersecting",
            SubsetKind::Distant => "distant",
        }
    }

    pub fn admits(self, pair: &PairGeometry, threshold: f64) -> bool {
        match self {
            SubsetKind::RatioLow => pair.size_ratio < threshold,
            SubsetKind::RatioHigh => pair.size_ratio >= threshold,
            SubsetKind::Intersecting => pair.iou > 0.0,
            SubsetKind::Distant => pair.iou == 0.0 && pair.separation >= threshold,
        }
    }
}

impl fmt::Display for SubsetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubsetKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ratio_low" => Ok(SubsetKind::RatioLow),
            "ratio_high" => Ok(SubsetKind::RatioHigh),
            "intersecting" => Ok(SubsetKind::Intersecting),
            "distant" => Ok(SubsetKind::Distant),
            other => Err(PipelineError::InvalidConfig(format!(
                "unknown subset kind '{other}' (ratio_low, ratio_high, intersecting, distant)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub kind: SubsetKind,
    pub threshold: f64,
    pub sample_size: usize,
    pub seed: u64,
}

impl SubsetSpec {
    pub fn new(kind: SubsetKind, sample_size: usize, seed: u64) -> Self {
        Self {
            kind,
            threshold: DEFAULT_SUBSET_THRESHOLD,
            sample_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.sample_size == 0 {
            return Err(PipelineError::InvalidConfig("sample_size must be positive".into()));
        }
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(PipelineError::InvalidConfig("threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Geometry of one annotated subject/object pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGeometry {
    pub key: PairKey,
    pub size_ratio: f64,
    pub iou: f64,
    pub separation: f64,
}

/// Every distinct directed pair that carries at least one relation, sorted.
pub fn pair_pool(dataset: &SceneGraphDataset) -> Vec<PairGeometry> {
    let mut out = Vec::new();
    for img in dataset.images() {
        let mut seen = BTreeSet::new();
        for r in &img.relations {
            if !seen.insert((r.subject_id, r.object_id)) {
                continue;
            }
            let (Some(s), Some(o)) = (img.object(r.subject_id), img.object(r.object_id)) else {
                continue;
            };
            out.push(PairGeometry {
                key: PairKey::new(img.image_id.clone(), r.subject_id, r.object_id),
                size_ratio: size_ratio(&s.bbox, &o.bbox),
                iou: iou(&s.bbox, &o.bbox),
                separation: separation(&s.bbox, &o.bbox, img.width, img.height),
            });
        }
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelection {
    pub spec: SubsetSpec,
    pub pool_size: usize,
    pub eligible: usize,
    pub pairs: Vec<PairKey>,
}

/// Samples `sample_size` qualifying pairs uniformly without replacement.
/// Returns every qualifying pair, with a warning, when there are fewer.
pub fn build_subset(dataset: &SceneGraphDataset, spec: &SubsetSpec) -> Result<SubsetSelection, PipelineError> {
    spec.validate()?;
    let pool = pair_pool(dataset);
    let eligible: Vec<&PairGeometry> = pool.iter().filter(|p| spec.kind.admits(p, spec.threshold)).collect();
    if eligible.is_empty() {
        return Err(PipelineError::NoEligiblePairs(spec.kind));
    }
    let mut pairs: Vec<PairKey> = if eligible.len() <= spec.sample_size {
        if eligible.len() < spec.sample_size {
            log::warn!(
                "{} subset: only {} qualifying pairs, fewer than the {} requested",
                spec.kind,
                eligible.len(),
                spec.sample_size
            );
        }
        eligible.iter().map(|p| p.key.clone()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rand::seq::index::sample(&mut rng, eligible.len(), spec.sample_size)
            .into_iter()
            .map(|i| eligible[i].key.clone())
            .collect()
    };
    pairs.sort();
    Ok(SubsetSelection {
        spec: spec.clone(),
        pool_size: pool.len(),
        eligible: eligible.len(),
        pairs,
    })
}

/// Writes one `{"image_id", "sub", "obj"}` object per line.
pub fn write_pair_list(path: &Path, pairs: &[PairKey]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_pair_list(path: &Path) -> Result<BTreeSet<PairKey>, PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let r = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = BTreeSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let key: PairKey = serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(key);
    }
    Ok(out)
}
