use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::region::{region_crop, triplet_text, RegionScorer};
use super::{
    corpus_relscore, image_relscore, par_map, rank_groundtruth, CorpusScore, ImageEvaluation, MetricConfig,
    MetricError, ProviderScore, RankingResult, ScoreMethod,
};
use crate::imaging::ImageStore;
use crate::model::{ImageRecord, PairKey, SceneGraphDataset};
use crate::providers::Provider;

/// A groundtruth triplet that lost to another candidate, and how often.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub groundtruth: String,
    pub preferred: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub backend: String,
    pub method: ScoreMethod,
    pub relations_evaluated: usize,
    /// Relations whose class pair only ever carries one predicate.
    pub single_candidate_relations: usize,
    /// Mean matching score in `[0, 1]`.
    pub mean_theta: f64,
    /// Share of relations whose groundtruth is the unique top candidate,
    /// times the report scale.
    pub precision: f64,
    /// Mean region score of the groundtruth triplets, times the report scale.
    pub mean_raw_score: f64,
    /// Penalised corpus score of the groundtruth graphs themselves.
    pub corpus: Option<CorpusScore>,
    pub per_image: Vec<ImageEvaluation<f64>>,
    pub rankings: Vec<RankingResult<f64>>,
    pub confusions: Vec<Confusion>,
}

/// Predicates ever annotated for each (subject label, object label) pair.
pub fn candidate_predicates(dataset: &SceneGraphDataset) -> BTreeMap<(String, String), BTreeSet<String>> {
    let mut out: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for img in dataset.images() {
        for r in &img.relations {
            if let (Some(s), Some(o)) = (img.object(r.subject_id), img.object(r.object_id)) {
                out.entry((s.label.clone(), o.label.clone()))
                    .or_default()
                    .insert(r.predicate.clone());
            }
        }
    }
    out
}

struct ImageOutcome {
    rankings: Vec<RankingResult<f64>>,
    eval: ImageEvaluation<f64>,
}

/// Scores every annotated relation against all predicates seen for its class
/// pair and measures how well the backend singles out the groundtruth.
pub fn alignment_study<P: Provider + ?Sized>(
    dataset: &SceneGraphDataset,
    store: &ImageStore,
    provider: &P,
    config: &MetricConfig,
) -> Result<AlignmentReport, MetricError> {
    config.validate()?;
    let scorer = RegionScorer::new(provider)?;
    let candidates = candidate_predicates(dataset);
    let outcomes = par_map(config.max_parallel, dataset.images(), |img| {
        align_image(img, store, &scorer, &candidates, config)
    })?;

    let mut per_image = Vec::with_capacity(outcomes.len());
    let mut rankings = Vec::new();
    for o in outcomes {
        per_image.push(o.eval);
        rankings.extend(o.rankings);
    }
    let n = rankings.len();
    let single = rankings.iter().filter(|r| r.candidate_scores.len() == 1).count();
    let (mean_theta, precision, mean_raw) = if n == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let nf = n as f64;
        (
            rankings.iter().map(|r| r.theta).sum::<f64>() / nf,
            rankings.iter().filter(|r| r.is_strict_top()).count() as f64 / nf * config.report_scale,
            rankings.iter().map(|r| r.groundtruth_score()).sum::<f64>() / nf * config.report_scale,
        )
    };
    let corpus = match corpus_relscore(&per_image, config) {
        Ok(c) => Some(c),
        Err(MetricError::AllImagesSkipped(_)) => None,
        Err(e) => return Err(e),
    };
    let confusions = tally_confusions(dataset, &rankings, &config.triplet_template);
    Ok(AlignmentReport {
        backend: provider.identity(),
        method: scorer.method(),
        relations_evaluated: n,
        single_candidate_relations: single,
        mean_theta,
        precision,
        mean_raw_score: mean_raw,
        corpus,
        per_image,
        rankings,
        confusions,
    })
}

fn align_image<P: Provider + ?Sized>(
    img: &ImageRecord,
    store: &ImageStore,
    scorer: &RegionScorer<'_, P>,
    candidates: &BTreeMap<(String, String), BTreeSet<String>>,
    config: &MetricConfig,
) -> Result<ImageOutcome, MetricError> {
    let image_err = |message: String| MetricError::Image {
        image_id: img.image_id.clone(),
        message,
    };
    let mut rankings = Vec::with_capacity(img.relations.len());
    let mut gt_scores = Vec::with_capacity(img.relations.len());
    if !img.relations.is_empty() {
        let pixels = store.load(img).map_err(|e| image_err(e.to_string()))?;
        for r in &img.relations {
            let (s, o) = match (img.object(r.subject_id), img.object(r.object_id)) {
                (Some(s), Some(o)) => (s, o),
                _ => return Err(image_err(format!("relation {}->{} has a dangling end", r.subject_id, r.object_id))),
            };
            let (_, crop) = region_crop(&img.image_id, &pixels, &s.bbox, &o.bbox, config.crop_expansion)
                .map_err(|e| image_err(e.to_string()))?;
            let key = PairKey::new(img.image_id.clone(), r.subject_id, r.object_id);
            let set = &candidates[&(s.label.clone(), o.label.clone())];
            let mut scored = Vec::with_capacity(set.len());
            for pred in set {
                let text = triplet_text(&config.triplet_template, &s.label, pred, &o.label);
                let score = scorer.score(&crop, &text).map_err(|source| MetricError::Provider {
                    region: key.to_string(),
                    source,
                })?;
                scored.push((pred.clone(), score.value));
            }
            let ranking = rank_groundtruth(key, scored, &r.predicate)?;
            gt_scores.push(ProviderScore {
                value: ranking.groundtruth_score(),
                method: scorer.method(),
            });
            rankings.push(ranking);
        }
    }
    let eval = image_relscore(&img.image_id, &gt_scores, img.objects.len(), config);
    Ok(ImageOutcome { rankings, eval })
}

fn tally_confusions(dataset: &SceneGraphDataset, rankings: &[RankingResult<f64>], template: &str) -> Vec<Confusion> {
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in rankings {
        let Some((other, _)) = r.confusion() else { continue };
        let Some(img) = dataset.image(&r.pair_key.image_id) else { continue };
        let (Some(s), Some(o)) = (img.object(r.pair_key.subject_id), img.object(r.pair_key.object_id)) else {
            continue;
        };
        let gt = triplet_text(template, &s.label, &r.groundtruth_predicate, &o.label);
        let alt = triplet_text(template, &s.label, other, &o.label);
        *counts.entry((gt, alt)).or_default() += 1;
    }
    let mut out: Vec<Confusion> = counts
        .into_iter()
        .map(|((groundtruth, preferred), count)| Confusion {
            groundtruth,
            preferred,
            count,
        })
        .collect();
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.groundtruth.cmp(&b.groundtruth))
            .then_with(|| a.preferred.cmp(&b.preferred))
    });
    out
}
