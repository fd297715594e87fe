//! The relation-score metric family.
//!
//! Per-region similarity is clamped cosine for embedding backends and the
//! backend probability otherwise. Per image, the mean region score is divided
//! by a log penalty on the number of object pairs left unpredicted:
//!
//! ```text
//! mean      = (1/k) * sum(score_n)
//! p         = m (m - 1) / 2
//! penalized = mean / max(log(p - k) + alpha, floor)     when p - k >= 1
//!           = mean / floor                              otherwise
//! ```
//!
//! The reference-augmented score is the harmonic mean of the region score and
//! the clamped text-text cosine between groundtruth and predicted triplets.
//! The matching score of a groundtruth predicate among its candidates is
//! `1 - rank / |candidates|`, where rank counts strictly higher scores.

mod alignment;
mod region;
mod scoring;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::PairKey;
use crate::scalar::Scalar;

pub use alignment::{alignment_study, candidate_predicates, AlignmentReport, Confusion};
pub use region::{region_crop, region_score, triplet_text, RegionScorer};
pub use scoring::{match_objects, score_predictions, score_predictions_within, PredictionReport, RelationScore, RelationStatus};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("groundtruth predicate '{0}' is not among the candidates")]
    GroundtruthMissing(String),
    #[error("every image was skipped ({0} images), corpus score is undefined")]
    AllImagesSkipped(usize),
    #[error("image ids differ between predictions and groundtruth: {0}")]
    ImageIdMismatch(String),
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
    #[error("scoring {region}: {source}")]
    Provider {
        region: String,
        #[source]
        source: crate::providers::ProviderError,
    },
    #[error("image {image_id}: {message}")]
    Image { image_id: String, message: String },
}

/// How a backend turns a region and a phrase into a similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    CosineClamped,
    SigmoidProb,
    ItmProb,
}

impl ScoreMethod {
    pub fn is_cosine(self) -> bool {
        matches!(self, ScoreMethod::CosineClamped)
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMethod::CosineClamped => "cosine_clamped",
            ScoreMethod::SigmoidProb => "sigmoid_prob",
            ScoreMethod::ItmProb => "itm_prob",
        })
    }
}

/// A region/phrase similarity in `[0, 1]`, tagged with how it was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ProviderScore<T: Scalar> {
    pub value: T,
    pub method: ScoreMethod,
}

impl<T: Scalar> ProviderScore<T> {
    pub fn new(value: T, method: ScoreMethod) -> Result<Self, MetricError> {
        if !(value >= T::zero() && value <= T::one()) {
            return Err(MetricError::ScoreOutOfRange(value.to_f64_lossy()));
        }
        Ok(Self { value, method })
    }

    /// Clamped cosine between a visual and a textual embedding.
    pub fn from_embeddings(visual: &[T], text: &[T]) -> Self {
        Self {
            value: clamped_cosine(visual, text),
            method: ScoreMethod::CosineClamped,
        }
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom <= T::zero() {
        return T::zero();
    }
    (dot / denom).max(-T::one()).min(T::one())
}

/// `max(cos(a, b), 0)`. Used both for region/text scores and for text/text
/// similarity between groundtruth and predicted triplets.
pub fn clamped_cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    cosine(a, b).max(T::zero())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
    Ten,
}

impl LogBase {
    pub fn log<T: Scalar>(self, x: T) -> T {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
            LogBase::Ten => x.log10(),
        }
    }
}

pub const DEFAULT_TRIPLET_TEMPLATE: &str = "{subject} {predicate} {object}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub alpha: f64,
    pub report_scale: f64,
    pub region_match_iou: f64,
    pub penalty_enabled: bool,
    pub denominator_floor: f64,
    pub log_base: LogBase,
    /// Text rendered for a triplet; `{subject}`, `{predicate}` and `{object}`
    /// are substituted.
    pub triplet_template: String,
    /// Context added around the union box before cropping.
    pub crop_expansion: f64,
    /// Upper bound on regions scored concurrently.
    pub max_parallel: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-5,
            report_scale: 100.0,
            region_match_iou: 0.5,
            penalty_enabled: true,
            denominator_floor: 1.0,
            log_base: LogBase::Natural,
            triplet_template: DEFAULT_TRIPLET_TEMPLATE.to_string(),
            crop_expansion: 0.2,
            max_parallel: 8,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: &str| Err(MetricError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.region_match_iou > 0.0 && self.region_match_iou <= 1.0) {
            return bad("region_match_iou must lie in (0, 1]");
        }
        if !(self.denominator_floor > 0.0) {
            return bad("denominator_floor must be positive");
        }
        if !(self.report_scale > 0.0) {
            return bad("report_scale must be positive");
        }
        if !(self.crop_expansion >= 0.0) {
            return bad("crop_expansion must be non-negative");
        }
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1");
        }
        Ok(())
    }
}

/// Number of unordered object pairs among `m` objects.
pub fn possible_pairs(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoScoredRelations,
    TooFewObjects,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::NoScoredRelations => "no scored relations",
            SkipReason::TooFewObjects => "fewer than two objects",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImageEvaluation<T: Scalar> {
    pub image_id: String,
    pub k: usize,
    pub m: usize,
    pub p: usize,
    pub mean_score: T,
    pub penalized_score: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<SkipReason>,
}

impl<T: Scalar> ImageEvaluation<T> {
    pub fn is_skipped(&self) -> bool {
        self.skipped.is_some()
    }
}

/// Aggregates the region scores of one image into its penalised score.
/// Degenerate images come back marked as skipped rather than as errors.
pub fn image_relscore<T: Scalar>(
    image_id: &str,
    scores: &[ProviderScore<T>],
    m: usize,
    config: &MetricConfig,
) -> ImageEvaluation<T> {
    let k = scores.len();
    let p = possible_pairs(m);
    let mut eval = ImageEvaluation {
        image_id: image_id.to_string(),
        k,
        m,
        p,
        mean_score: T::zero(),
        penalized_score: T::zero(),
        skipped: None,
    };
    if k == 0 {
        eval.skipped = Some(SkipReason::NoScoredRelations);
        return eval;
    }
    let sum = scores.iter().fold(T::zero(), |acc, s| acc + s.value);
    eval.mean_score = sum / T::from_count(k);
    if m < 2 {
        eval.skipped = Some(SkipReason::TooFewObjects);
        return eval;
    }
    eval.penalized_score = eval.mean_score / penalty_denominator(p, k, config);
    eval
}

/// Divisor applied to the mean score for `p` possible pairs and `k` scored
/// relations.
pub fn penalty_denominator<T: Scalar>(p: usize, k: usize, config: &MetricConfig) -> T {
    let floor = T::lit(config.denominator_floor);
    if config.penalty_enabled && p > k {
        let unpredicted = T::from_count(p - k);
        (config.log_base.log(unpredicted) + T::lit(config.alpha)).max(floor)
    } else {
        floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    /// Mean penalised score over non-skipped images, times `report_scale`.
    pub value: f64,
    pub images_scored: usize,
    pub images_skipped: usize,
}

pub fn corpus_relscore<T: Scalar>(
    per_image: &[ImageEvaluation<T>],
    config: &MetricConfig,
) -> Result<CorpusScore, MetricError> {
    let used: Vec<T> = per_image
        .iter()
        .filter(|e| !e.is_skipped())
        .map(|e| e.penalized_score)
        .collect();
    if used.is_empty() {
        return Err(MetricError::AllImagesSkipped(per_image.len()));
    }
    let mean = used.iter().fold(T::zero(), |a, &b| a + b) / T::from_count(used.len());
    Ok(CorpusScore {
        value: mean.to_f64_lossy() * config.report_scale,
        images_scored: used.len(),
        images_skipped: per_image.len() - used.len(),
    })
}

/// Harmonic mean of the region score and the text-text similarity.
pub fn ref_relscore<T: Scalar>(image_text_score: T, sim_text: T) -> T {
    let sum = image_text_score + sim_text;
    if sum <= T::zero() {
        return T::zero();
    }
    T::lit(2.0) * image_text_score * sim_text / sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RankingResult<T: Scalar> {
    pub pair_key: PairKey,
    pub candidate_scores: Vec<(String, T)>,
    pub groundtruth_predicate: String,
    pub rank: usize,
    pub theta: T,
}

impl<T: Scalar> RankingResult<T> {
    /// The groundtruth is the unique best candidate.
    pub fn is_strict_top(&self) -> bool {
        let gt = self.groundtruth_score();
        self.candidate_scores
            .iter()
            .filter(|(p, _)| *p != self.groundtruth_predicate)
            .all(|(_, s)| *s < gt)
    }

    pub fn groundtruth_score(&self) -> T {
        self.candidate_scores
            .iter()
            .find(|(p, _)| *p == self.groundtruth_predicate)
            .map(|(_, s)| *s)
            .unwrap_or_else(T::zero)
    }

    /// Highest-scoring candidate other than the groundtruth, when it beats it.
    pub fn confusion(&self) -> Option<(&str, T)> {
        let gt = self.groundtruth_score();
        self.candidate_scores
            .iter()
            .filter(|(p, s)| *p != self.groundtruth_predicate && *s > gt)
            .fold(None, |best: Option<(&str, T)>, (p, s)| match best {
                Some((bp, bs)) if bs > *s || (bs == *s && bp <= p.as_str()) => Some((bp, bs)),
                _ => Some((p.as_str(), *s)),
            })
    }
}

/// Rank of the groundtruth among the candidates (strictly higher scores
/// only) and the derived matching score.
pub fn rank_groundtruth<T: Scalar>(
    pair_key: PairKey,
    pair_scores: Vec<(String, T)>,
    groundtruth: &str,
) -> Result<RankingResult<T>, MetricError> {
    let gt = pair_scores
        .iter()
        .find(|(p, _)| p == groundtruth)
        .map(|(_, s)| *s)
        .ok_or_else(|| MetricError::GroundtruthMissing(groundtruth.to_string()))?;
    let rank = pair_scores.iter().filter(|(_, s)| *s > gt).count();
    // (|L| - rank) / |L| is a single rounding, so theta is the float nearest the exact ratio
    let theta = T::from_count(pair_scores.len() - rank) / T::from_count(pair_scores.len());
    Ok(RankingResult {
        pair_key,
        candidate_scores: pair_scores,
        groundtruth_predicate: groundtruth.to_string(),
        rank,
        theta,
    })
}

/// Maps `f` over `items` on at most `threads` workers, keeping input order.
pub(crate) fn par_map<I, R, E, F>(threads: usize, items: &[I], f: F) -> Result<Vec<R>, E>
where
    I: Sync,
    R: Send,
    E: Send,
    F: Fn(&I) -> Result<R, E> + Sync,
{
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}), running sequentially");
            items.iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> Vec<ProviderScore<f64>> {
        v.iter().map(|&x| ProviderScore::new(x, ScoreMethod::CosineClamped).unwrap()).collect()
    }

    fn key() -> PairKey {
        PairKey::new("img", 1, 2)
    }

    #[test]
    fn clamped_cosine_cases() {
        let a = [0.6, 0.8, 0.0];
        assert_relative_eq!(ProviderScore::from_embeddings(&a, &a).value, 1.0, epsilon = 1e-12);
        assert_eq!(ProviderScore::from_embeddings(&a, &[0.0, 0.0, 1.0]).value, 0.0);
        assert_eq!(ProviderScore::from_embeddings(&a, &[-0.6, -0.8, 0.0]).value, 0.0);
        assert_eq!(clamped_cosine::<f32>(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn provider_score_range_checked() {
        assert!(ProviderScore::new(1.2, ScoreMethod::ItmProb).is_err());
        assert!(ProviderScore::new(f64::NAN, ScoreMethod::ItmProb).is_err());
        assert!(ProviderScore::new(0.0f32, ScoreMethod::SigmoidProb).is_ok());
    }

    #[test]
    fn image_relscore_examples() {
        let cfg = MetricConfig::default();
        let e = image_relscore::<f64>("a", &[], 5, &cfg);
        assert_eq!(e.skipped, Some(SkipReason::NoScoredRelations));
        assert_eq!(e.skipped.unwrap().to_string(), "no scored relations");
        assert_eq!(possible_pairs(4), 6);

        let e = image_relscore("b", &scores(&[0.4, 0.6]), 10, &cfg);
        assert_eq!((e.k, e.m, e.p), (2, 10, 45));
        assert_relative_eq!(e.mean_score, 0.5, epsilon = 1e-15);
        // 0.5 / (ln 43 + 1e-5), evaluated at 40 digits
        assert_relative_eq!(e.penalized_score, 0.132_935_939_397_206_642_8, epsilon = 1e-15);
        assert!(e.skipped.is_none());

        let e = image_relscore("c", &scores(&[0.4]), 1, &cfg);
        assert_eq!(e.skipped, Some(SkipReason::TooFewObjects));
    }

    #[test]
    fn denominator_is_floored() {
        let cfg = MetricConfig::default();
        // p - k = 1: ln(1) + alpha < 1
        assert_eq!(penalty_denominator::<f64>(3, 2, &cfg), 1.0);
        // p - k <= 0
        assert_eq!(penalty_denominator::<f64>(1, 4, &cfg), 1.0);
        let off = MetricConfig { penalty_enabled: false, denominator_floor: 2.0, ..cfg };
        assert_eq!(penalty_denominator::<f64>(45, 2, &off), 2.0);
    }

    #[test]
    fn log_base_selectable() {
        let cfg = MetricConfig { log_base: LogBase::Ten, ..Default::default() };
        assert_relative_eq!(penalty_denominator::<f64>(1002, 2, &cfg), 3.0 + 1e-5, epsilon = 1e-12);
    }

    #[test]
    fn corpus_examples() {
        let cfg = MetricConfig::default();
        let mk = |v: f64| ImageEvaluation {
            image_id: "x".into(),
            k: 1,
            m: 2,
            p: 1,
            mean_score: v,
            penalized_score: v,
            skipped: None,
        };
        assert_relative_eq!(corpus_relscore(&[mk(0.24)], &cfg).unwrap().value, 24.0, epsilon = 1e-12);
        let two = corpus_relscore(&[mk(0.2), mk(0.3)], &cfg).unwrap();
        assert_relative_eq!(two.value, 25.0, epsilon = 1e-12);
        let mut skipped = mk(0.9);
        skipped.skipped = Some(SkipReason::TooFewObjects);
        let s = corpus_relscore(&[mk(0.2), skipped.clone()], &cfg).unwrap();
        assert_eq!((s.images_scored, s.images_skipped), (1, 1));
        assert!(matches!(corpus_relscore(&[skipped], &cfg), Err(MetricError::AllImagesSkipped(1))));
    }

    #[test]
    fn ref_relscore_examples() {
        assert_relative_eq!(ref_relscore(0.5, 0.5), 0.5);
        assert_eq!(ref_relscore(0.0, 0.9), 0.0);
        assert_eq!(ref_relscore(0.0, 0.0), 0.0);
        assert_relative_eq!(ref_relscore(0.24, 0.96), 0.384, epsilon = 1e-15);
    }

    #[test]
    fn ranking_examples() {
        let c = |v: &[(&str, f64)]| v.iter().map(|(p, s)| (p.to_string(), *s)).collect::<Vec<_>>();
        let top = rank_groundtruth(key(), c(&[("a", 0.9), ("b", 0.1), ("c", 0.2), ("d", 0.3), ("e", 0.4)]), "a").unwrap();
        assert_eq!((top.rank, top.theta), (0, 1.0));
        assert!(top.is_strict_top());
        assert!(top.confusion().is_none());

        let fourth = rank_groundtruth(key(), c(&[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.3), ("e", 0.1)]), "d").unwrap();
        assert_eq!(fourth.rank, 3);
        assert_relative_eq!(fourth.theta, 0.4, epsilon = 1e-15);
        assert_eq!(fourth.confusion(), Some(("a", 0.9)));

        let tied = rank_groundtruth(key(), c(&[("on", 0.5), ("on top of", 0.5), ("under", 0.1)]), "on").unwrap();
        assert_eq!((tied.rank, tied.theta), (0, 1.0));
        assert!(!tied.is_strict_top());

        let single = rank_groundtruth(key(), c(&[("on", 0.0)]), "on").unwrap();
        assert_eq!(single.theta, 1.0);
        assert!(single.is_strict_top());

        assert!(matches!(
            rank_groundtruth(key(), c(&[("on", 0.5)]), "in"),
            Err(MetricError::GroundtruthMissing(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(MetricConfig::default().validate().is_ok());
        assert!(MetricConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(MetricConfig { region_match_iou: 1.5, ..Default::default() }.validate().is_err());
        assert!(MetricConfig { denominator_floor: 0.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn ref_relscore_is_a_mean(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assert!((ref_relscore(a, b) - ref_relscore(b, a)).abs() < 1e-15);
            if a > 0.0 && b > 0.0 {
                let h = ref_relscore(a, b);
                prop_assert!(h >= a.min(b) - 1e-15 && h <= a.max(b) + 1e-15);
            }
            prop_assert!((ref_relscore(a, a) - a).abs() < 1e-15);
        }

        #[test]
        fn ranking_is_scale_invariant(
            raw in proptest::collection::vec(0.0f64..1.0, 1..20),
            gt_idx in 0usize..20,
            factor in 0.01f64..100.0,
        ) {
            let gt_idx = gt_idx % raw.len();
            let names: Vec<String> = (0..raw.len()).map(|i| format!("p{i}")).collect();
            let a: Vec<(String, f64)> = names.iter().cloned().zip(raw.iter().copied()).collect();
            let b: Vec<(String, f64)> = names.iter().cloned().zip(raw.iter().map(|v| v * factor)).collect();
            let ra = rank_groundtruth(key(), a, &names[gt_idx]).unwrap();
            let rb = rank_groundtruth(key(), b, &names[gt_idx]).unwrap();
            prop_assert_eq!(ra.rank, rb.rank);
            prop_assert_eq!(ra.theta, rb.theta);
            prop_assert_eq!(ra.is_strict_top(), rb.is_strict_top());
            prop_assert!(ra.theta > 0.0 && ra.theta <= 1.0);
        }

        #[test]
        fn scores_stay_in_unit_interval(v in proptest::collection::vec(0.0f64..=1.0, 1..20), m in 2usize..30) {
            let cfg = MetricConfig::default();
            let e = image_relscore("x", &scores(&v), m, &cfg);
            prop_assert!(e.penalized_score >= 0.0 && e.penalized_score <= 1.0);
        }
    }
}
