use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::region::{region_crop, triplet_text, RegionScorer};
use super::{
    corpus_relscore, image_relscore, par_map, ref_relscore, CorpusScore, ImageEvaluation, MetricConfig, MetricError,
    ScoreMethod,
};
use crate::geometry::iou;
use crate::imaging::ImageStore;
use crate::model::{ImageRecord, ObjectId, PairKey, SceneGraphDataset};
use crate::providers::Provider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationStatus {
    Admitted,
    UnmatchedSubject,
    UnmatchedObject,
    /// Both ends match groundtruth objects that share no annotated relation.
    NoGroundtruthRelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub pair_key: PairKey,
    pub triplet: String,
    pub status: RelationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundtruth_pair: Option<PairKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_text: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_score: Option<f64>,
    pub exact_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub backend: String,
    pub method: ScoreMethod,
    pub relations_total: usize,
    pub relations_admitted: usize,
    pub not_admitted: usize,
    /// Share of predicted relations whose predicate equals a groundtruth
    /// predicate of the matched pair, times the report scale.
    pub precision: f64,
    /// `None` when every image was skipped.
    pub corpus: Option<CorpusScore>,
    /// Mean per-image reference-augmented score, times the report scale.
    /// `None` when the backend has no text encoder.
    pub ref_corpus: Option<f64>,
    pub per_image: Vec<ImageEvaluation<f64>>,
    pub relations: Vec<RelationScore>,
}

/// Greedy one-to-one assignment of predicted to groundtruth objects, highest
/// IoU first, keeping only pairs at or above `threshold`.
pub fn match_objects(predicted: &ImageRecord, groundtruth: &ImageRecord, threshold: f64) -> BTreeMap<ObjectId, ObjectId> {
    let mut cands = Vec::new();
    for p in &predicted.objects {
        for g in &groundtruth.objects {
            let v = iou(&p.bbox, &g.bbox);
            if v >= threshold {
                cands.push((v, p.id, g.id));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = BTreeSet::new();
    let mut used_g = BTreeSet::new();
    let mut out = BTreeMap::new();
    for (_, p, g) in cands {
        if used_p.contains(&p) || used_g.contains(&g) {
            continue;
        }
        used_p.insert(p);
        used_g.insert(g);
        out.insert(p, g);
    }
    out
}

struct ImageOutcome {
    relations: Vec<RelationScore>,
    eval: ImageEvaluation<f64>,
    ref_mean: Option<f64>,
}

/// Scores a predicted scene-graph corpus image by image against the
/// groundtruth it was predicted for.
pub fn score_predictions<P: Provider + ?Sized>(
    predictions: &SceneGraphDataset,
    groundtruth: &SceneGraphDataset,
    store: &ImageStore,
    provider: &P,
    config: &MetricConfig,
) -> Result<PredictionReport, MetricError> {
    score_predictions_within(predictions, groundtruth, store, provider, config, None)
}

/// Like [`score_predictions`], but only groundtruth pairs listed in `subset`
/// take part. Predicted relations that do not land on one of them are ignored
/// and images without any listed pair are left out.
pub fn score_predictions_within<P: Provider + ?Sized>(
    predictions: &SceneGraphDataset,
    groundtruth: &SceneGraphDataset,
    store: &ImageStore,
    provider: &P,
    config: &MetricConfig,
    subset: Option<&BTreeSet<PairKey>>,
) -> Result<PredictionReport, MetricError> {
    config.validate()?;
    let pred_ids: BTreeSet<&str> = predictions.images().iter().map(|i| i.image_id.as_str()).collect();
    let gt_ids: BTreeSet<&str> = groundtruth.images().iter().map(|i| i.image_id.as_str()).collect();
    if pred_ids != gt_ids {
        let only_pred: Vec<&str> = pred_ids.difference(&gt_ids).copied().take(5).collect();
        let only_gt: Vec<&str> = gt_ids.difference(&pred_ids).copied().take(5).collect();
        return Err(MetricError::ImageIdMismatch(format!(
            "only in predictions: {only_pred:?}, only in groundtruth: {only_gt:?}"
        )));
    }
    let scorer = RegionScorer::new(provider)?;
    let images: Vec<&ImageRecord> = match subset {
        None => predictions.images().iter().collect(),
        Some(keys) => {
            let ids: BTreeSet<&str> = keys.iter().map(|k| k.image_id.as_str()).collect();
            predictions.images().iter().filter(|i| ids.contains(i.image_id.as_str())).collect()
        }
    };
    let outcomes = par_map(config.max_parallel, &images, |pred| {
        let gt = groundtruth.image(&pred.image_id).expect("id sets checked above");
        score_image(pred, gt, store, &scorer, config, subset)
    })?;

    let mut per_image = Vec::with_capacity(outcomes.len());
    let mut relations = Vec::new();
    let mut ref_means = Vec::new();
    let mut ref_available = true;
    for o in outcomes {
        let admitted_here = o.eval.k;
        per_image.push(o.eval);
        match o.ref_mean {
            Some(v) => ref_means.push(v),
            None if admitted_here > 0 => ref_available = false,
            None => {}
        }
        relations.extend(o.relations);
    }
    let total = relations.len();
    let admitted = relations.iter().filter(|r| r.status == RelationStatus::Admitted).count();
    let exact = relations.iter().filter(|r| r.exact_match).count();
    let precision = if total == 0 {
        0.0
    } else {
        exact as f64 / total as f64 * config.report_scale
    };
    let corpus = match corpus_relscore(&per_image, config) {
        Ok(c) => Some(c),
        Err(MetricError::AllImagesSkipped(n)) => {
            log::warn!("all {n} images were skipped, no corpus score");
            None
        }
        Err(e) => return Err(e),
    };
    let ref_corpus = (ref_available && !ref_means.is_empty())
        .then(|| ref_means.iter().sum::<f64>() / ref_means.len() as f64 * config.report_scale);
    Ok(PredictionReport {
        backend: provider.identity(),
        method: scorer.method(),
        relations_total: total,
        relations_admitted: admitted,
        not_admitted: total - admitted,
        precision,
        corpus,
        ref_corpus,
        per_image,
        relations,
    })
}

fn score_image<P: Provider + ?Sized>(
    pred: &ImageRecord,
    gt: &ImageRecord,
    store: &ImageStore,
    scorer: &RegionScorer<'_, P>,
    config: &MetricConfig,
    subset: Option<&BTreeSet<PairKey>>,
) -> Result<ImageOutcome, MetricError> {
    let image_err = |message: String| MetricError::Image {
        image_id: pred.image_id.clone(),
        message,
    };
    let matched = match_objects(pred, gt, config.region_match_iou);
    let mut gt_preds: BTreeMap<(ObjectId, ObjectId), Vec<&str>> = BTreeMap::new();
    let listed = |s: ObjectId, o: ObjectId| subset.is_none_or(|k| k.contains(&PairKey::new(gt.image_id.clone(), s, o)));
    for r in gt.relations.iter().filter(|r| listed(r.subject_id, r.object_id)) {
        gt_preds.entry((r.subject_id, r.object_id)).or_default().push(&r.predicate);
    }

    let mut pixels = None;
    let mut relations = Vec::with_capacity(pred.relations.len());
    let mut scores = Vec::new();
    let mut refs = Vec::new();
    let mut ref_supported = true;
    for r in &pred.relations {
        let key = PairKey::new(pred.image_id.clone(), r.subject_id, r.object_id);
        let (Some(ps), Some(po)) = (pred.object(r.subject_id), pred.object(r.object_id)) else {
            return Err(image_err(format!("relation {key} has a dangling end")));
        };
        let triplet = triplet_text(&config.triplet_template, &ps.label, &r.predicate, &po.label);
        let mut entry = RelationScore {
            pair_key: key.clone(),
            triplet,
            status: RelationStatus::Admitted,
            groundtruth_pair: None,
            region_score: None,
            sim_text: None,
            ref_score: None,
            exact_match: false,
        };
        let gs = matched.get(&r.subject_id);
        let go = matched.get(&r.object_id);
        let gt_pair = match (gs, go) {
            (None, _) => Err(RelationStatus::UnmatchedSubject),
            (_, None) => Err(RelationStatus::UnmatchedObject),
            (Some(&s), Some(&o)) => gt_preds.get(&(s, o)).map(|p| (s, o, p)).ok_or(RelationStatus::NoGroundtruthRelation),
        };
        let (gs, go, predicates) = match gt_pair {
            Ok(v) => v,
            Err(_) if subset.is_some() => continue,
            Err(status) => {
                entry.status = status;
                relations.push(entry);
                continue;
            }
        };
        entry.groundtruth_pair = Some(PairKey::new(gt.image_id.clone(), gs, go));
        entry.exact_match = predicates.iter().any(|p| *p == r.predicate);

        if pixels.is_none() {
            pixels = Some(store.load(pred).map_err(|e| image_err(e.to_string()))?);
        }
        let img = pixels.as_ref().expect("loaded above");
        let (_, crop) =
            region_crop(&pred.image_id, img, &ps.bbox, &po.bbox, config.crop_expansion).map_err(|e| image_err(e.to_string()))?;
        let provider_err = |source| MetricError::Provider {
            region: key.to_string(),
            source,
        };
        let score = scorer.score(&crop, &entry.triplet).map_err(provider_err)?;
        entry.region_score = Some(score.value);
        scores.push(score);

        if ref_supported {
            let (Some(gso), Some(goo)) = (gt.object(gs), gt.object(go)) else {
                return Err(image_err(format!("groundtruth pair {gs}->{go} has a dangling end")));
            };
            let mut best: Option<f64> = None;
            for p in predicates {
                let gt_text = triplet_text(&config.triplet_template, &gso.label, p, &goo.label);
                match scorer.text_similarity(&gt_text, &entry.triplet).map_err(provider_err)? {
                    Some(v) => best = Some(best.map_or(v, |b: f64| b.max(v))),
                    None => {
                        ref_supported = false;
                        break;
                    }
                }
            }
            if let Some(sim) = best.filter(|_| ref_supported) {
                let rs = ref_relscore(score.value, sim);
                entry.sim_text = Some(sim);
                entry.ref_score = Some(rs);
                refs.push(rs);
            }
        }
        relations.push(entry);
    }
    let eval = image_relscore(&pred.image_id, &scores, gt.objects.len(), config);
    let ref_mean = (ref_supported && !refs.is_empty()).then(|| refs.iter().sum::<f64>() / refs.len() as f64);
    Ok(ImageOutcome {
        relations,
        eval,
        ref_mean,
    })
}
