//! Corpus statistics: counts, predicate histogram and long-tail curve.

use serde::{Deserialize, Serialize};

use crate::model::{predicate_histogram, SceneGraphDataset};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateCount {
    pub predicate: String,
    pub count: u64,
}

/// One point of the rank/frequency curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailPoint {
    pub rank: usize,
    pub count: u64,
    pub cumulative_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub images: usize,
    pub objects: usize,
    pub triplets: usize,
    pub distinct_predicates: usize,
    pub mean_relations_per_image: f64,
    /// Sorted by count, most frequent first.
    pub histogram: Vec<PredicateCount>,
    pub top_k: Vec<PredicateCount>,
    pub long_tail: Vec<LongTailPoint>,
}

pub fn dataset_stats(dataset: &SceneGraphDataset, top_k: usize) -> DatasetStats {
    let histogram: Vec<PredicateCount> = predicate_histogram(dataset)
        .into_iter()
        .map(|(predicate, count)| PredicateCount { predicate, count })
        .collect();
    let triplets = dataset.relation_count();
    let mut running = 0u64;
    let long_tail = histogram
        .iter()
        .enumerate()
        .map(|(i, h)| {
            running += h.count;
            LongTailPoint {
                rank: i + 1,
                count: h.count,
                cumulative_fraction: running as f64 / triplets as f64,
            }
        })
        .collect();
    let images = dataset.images().len();
    DatasetStats {
        name: dataset.name.clone(),
        images,
        objects: dataset.object_count(),
        triplets,
        distinct_predicates: histogram.len(),
        mean_relations_per_image: if images == 0 { 0.0 } else { triplets as f64 / images as f64 },
        top_k: histogram.iter().take(top_k).cloned().collect(),
        histogram,
        long_tail,
    }
}
