//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relscore_core::geometry::{expand_and_clamp, iou, separation, size_ratio, union_box, BBox};
use relscore_core::imaging::ImageStore;
use relscore_core::metrics::{
    image_relscore, penalty_denominator, rank_groundtruth, score_predictions, MetricConfig, ProviderScore,
    ScoreMethod,
};
use relscore_core::model::{save_dataset, PairKey, Provenance, SceneGraphDataset};
use relscore_core::pipeline::{
    build_subset, generate_dataset, pair_pool, Blocklist, GenerationConfig, GenerationRecord, GenerationStatus,
    Ledger, RunLimits, SubsetKind, SubsetSpec,
};
use relscore_core::providers::{
    BackendName, CachedProvider, EmbeddingVector, GenerationRequest, ImagePayload, MockProvider, Provider,
    ProviderError, ScoreCache,
};
use relscore_core::synth::{synthetic_dataset, write_images, SynthSpec};
use serde_json::Value;

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// atanh(x) by its power series, to about 1e-40 for |x| <= 1/3.
fn atanh_series(x: &BigRational) -> BigRational {
    let x2 = x * x;
    let mut term = x.clone();
    let mut sum = rat(0, 1);
    for n in 0..45i64 {
        sum += &term / rat(2 * n + 1, 1);
        term = &term * &x2;
    }
    sum
}

/// ln 43 = 5 ln 2 + ln(43/32), each from atanh: ln(y) = 2 atanh((y-1)/(y+1)).
fn ln43_exact() -> BigRational {
    let ln2 = atanh_series(&rat(1, 3)) * rat(2, 1);
    let ln_43_32 = atanh_series(&rat(11, 75)) * rat(2, 1);
    ln2 * rat(5, 1) + ln_43_32
}

fn count_pairs(m: usize) -> usize {
    let mut n = 0;
    for i in 0..m {
        for j in 0..m {
            if i < j {
                n += 1;
            }
        }
    }
    n
}

/// Penalised score written straight from the definitions, or None when the
/// image does not count.
fn oracle_image(scores: &[f64], m: usize, alpha: f64, floor: f64) -> Option<f64> {
    if scores.is_empty() || m < 2 {
        return None;
    }
    let mut sum = 0.0;
    for s in scores {
        sum += s;
    }
    let mean = sum / scores.len() as f64;
    let p = count_pairs(m) as i64;
    let unpredicted = p - scores.len() as i64;
    let denom = if unpredicted >= 1 {
        let d = (unpredicted as f64).ln() + alpha;
        if d > floor {
            d
        } else {
            floor
        }
    } else {
        floor
    };
    Some(mean / denom)
}

/// True when `x` is a nearest double to `q`.
fn nearest_f64(x: f64, q: &BigRational) -> bool {
    let here = (BigRational::from_float(x).unwrap() - q).abs();
    [f64::from_bits(x.to_bits() + 1), f64::from_bits(x.to_bits() - 1)]
        .iter()
        .all(|n| here <= (BigRational::from_float(*n).unwrap() - q).abs())
}

fn nearest_f32(x: f32, q: &BigRational) -> bool {
    let here = (BigRational::from_float(x).unwrap() - q).abs();
    [f32::from_bits(x.to_bits() + 1), f32::from_bits(x.to_bits() - 1)]
        .iter()
        .all(|n| here <= (BigRational::from_float(*n).unwrap() - q).abs())
}

fn cells(b: &BBox<f64>) -> HashSet<(i64, i64)> {
    let (x0, y0, x1, y1) = (b.x as i64, b.y as i64, b.x1() as i64, b.y1() as i64);
    (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).collect()
}

fn raster_iou(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let (sa, sb) = (cells(a), cells(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Closest distance between integer perimeter points; exact for integer boxes.
fn brute_gap(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let perimeter = |r: &BBox<f64>| {
        let mut v = Vec::new();
        for i in 0..=r.w as i64 {
            v.push((r.x + i as f64, r.y));
            v.push((r.x + i as f64, r.y1()));
        }
        for j in 0..=r.h as i64 {
            v.push((r.x, r.y + j as f64));
            v.push((r.x1(), r.y + j as f64));
        }
        v
    };
    if a.x < b.x1() && b.x < a.x1() && a.y < b.y1() && b.y < a.y1() {
        return 0.0;
    }
    let (pa, pb) = (perimeter(a), perimeter(b));
    let mut best = f64::INFINITY;
    for p in &pa {
        for q in &pb {
            best = best.min(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt());
        }
    }
    best
}

fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox<f64> {
    BBox::new(x, y, w, h).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox<f64> {
    bx(
        rng.random_range(0..40) as f64,
        rng.random_range(0..40) as f64,
        rng.random_range(1..25) as f64,
        rng.random_range(1..25) as f64,
    )
}

fn synth_fixture(images: usize, seed: u64, dir: &Path) -> (SceneGraphDataset, ImageStore) {
    let ds = synthetic_dataset(&SynthSpec {
        images,
        seed,
        ..SynthSpec::default()
    });
    write_images(&ds, dir).unwrap();
    (ds, ImageStore::new(dir))
}

// ---------------------------------------------------------------- criteria

fn formula_oracle() -> Outcome {
    let cfg = MetricConfig::default();

    // the documented example against a 40-digit evaluation
    let scores = [0.4, 0.6].map(|v| ProviderScore::new(v, ScoreMethod::CosineClamped).unwrap());
    let e = image_relscore("doc", &scores, 10, &cfg);
    let exact = rat(1, 2) / (ln43_exact() + rat(1, 100_000));
    let got = BigRational::from_float(e.penalized_score).unwrap();
    let err = (got - &exact).abs().to_f64().unwrap();
    ensure!(err < 1e-15, "documented case off by {err:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    for case in 0..1000 {
        let k = rng.random_range(0..=20usize);
        let m = rng.random_range(0..=30usize);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let wrapped: Vec<ProviderScore<f64>> = raw
            .iter()
            .map(|&v| ProviderScore::new(v, ScoreMethod::CosineClamped).unwrap())
            .collect();
        let eval = image_relscore("case", &wrapped, m, &cfg);
        match oracle_image(&raw, m, cfg.alpha, cfg.denominator_floor) {
            None => ensure!(eval.is_skipped(), "case {case}: k={k} m={m} should be skipped"),
            Some(want) => {
                ensure!(!eval.is_skipped(), "case {case}: k={k} m={m} skipped");
                let d = (eval.penalized_score - want).abs();
                ensure!(d <= 1e-9, "case {case}: k={k} m={m} got {} want {want}", eval.penalized_score);
            }
        }
    }

    // theta for every rank and candidate-list size up to 20, in both widths
    for len in 1..=20usize {
        for rank in 0..len {
            let mut scores = Vec::new();
            for i in 0..rank {
                scores.push((format!("above{i}"), 0.9 - i as f64 * 1e-3));
            }
            scores.push(("gt".to_string(), 0.5));
            for i in 0..len - 1 - rank {
                // alternate ties and lower scores; ties do not count
                let s = if i % 2 == 0 { 0.5 } else { 0.1 };
                scores.push((format!("other{i}"), s));
            }
            let key = PairKey::new("img", 0, 1);
            let q = rat((len - rank) as i64, len as i64);

            let r64 = rank_groundtruth(key.clone(), scores.clone(), "gt").map_err(|e| e.to_string())?;
            ensure!(r64.rank == rank, "|L|={len}: rank {} want {rank}", r64.rank);
            ensure!(nearest_f64(r64.theta, &q), "|L|={len} rank={rank}: f64 theta {} inexact", r64.theta);

            let s32: Vec<(String, f32)> = scores.iter().map(|(p, s)| (p.clone(), *s as f32)).collect();
            let r32 = rank_groundtruth(key, s32, "gt").map_err(|e| e.to_string())?;
            ensure!(r32.rank == rank, "|L|={len}: f32 rank {}", r32.rank);
            ensure!(nearest_f32(r32.theta, &q), "|L|={len} rank={rank}: f32 theta {} inexact", r32.theta);
        }
    }
    Ok(())
}

fn penalty_behaviour() -> Outcome {
    let cfg = MetricConfig::default();
    let floor = cfg.denominator_floor;
    for p in 0..=100usize {
        let mut previous: Option<f64> = None;
        for k in 0..=p {
            let d: f64 = penalty_denominator(p, k, &cfg);
            ensure!(d.is_finite() && d >= floor, "p={p} k={k}: denominator {d}");
            for mean in [0.0, 0.25, 0.731, 1.0] {
                let score = mean / d;
                ensure!(score.is_finite() && score >= 0.0, "p={p} k={k}: score {score}");
                ensure!(score <= mean / floor, "p={p} k={k}: {score} exceeds {}", mean / floor);
            }
            let score = 0.731 / d;
            if let Some(prev) = previous {
                let in_log_regime = p > k && ((p - k) as f64).ln() + cfg.alpha >= floor;
                ensure!(
                    !in_log_regime || score >= prev,
                    "p={p}: score fell from {prev} to {score} at k={k}"
                );
            }
            previous = Some(score);
        }
    }
    // through image_relscore for every object count whose pair count fits
    for m in 2..=14usize {
        let p = count_pairs(m);
        for k in 1..=p {
            let s = vec![ProviderScore::new(0.6, ScoreMethod::CosineClamped).unwrap(); k];
            let e = image_relscore("m", &s, m, &cfg);
            ensure!(e.p == p, "m={m}: p={} want {p}", e.p);
            let want = oracle_image(&vec![0.6; k], m, cfg.alpha, floor).unwrap();
            ensure!((e.penalized_score - want).abs() <= 1e-12, "m={m} k={k}");
            ensure!(e.penalized_score <= 0.6 / floor + 1e-15, "m={m} k={k}: above mean");
        }
    }
    Ok(())
}

fn geometry_suite() -> Outcome {
    let a = bx(0.0, 0.0, 2.0, 2.0);
    let b = bx(1.0, 1.0, 2.0, 2.0);
    ensure!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12, "iou example {}", iou(&a, &b));
    ensure!((raster_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12, "raster disagrees on the example");
    let (l, r) = (bx(0.0, 0.0, 10.0, 10.0), bx(510.0, 0.0, 10.0, 10.0));
    let sep = separation(&l, &r, 1000, 800);
    ensure!((sep - 0.5).abs() < 1e-12, "separation example {sep}");
    ensure!((brute_gap(&l, &r) / 1000.0 - 0.5).abs() < 1e-12, "brute gap disagrees on the example");
    ensure!(
        expand_and_clamp(&bx(10.0, 10.0, 100.0, 100.0), 0.2, 1000, 1000) == bx(0.0, 0.0, 120.0, 120.0),
        "expand example"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (w, h) = (64u32, 60u32);
    for case in 0..1500 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let v = iou(&a, &b);
        ensure!(v == iou(&b, &a), "case {case}: iou not symmetric");
        ensure!((0.0..=1.0).contains(&v), "case {case}: iou {v}");
        ensure!((v - raster_iou(&a, &b)).abs() < 1e-12, "case {case}: iou {v} vs raster {}", raster_iou(&a, &b));
        ensure!((iou(&a, &a) - 1.0).abs() < 1e-15, "case {case}: self iou");

        let u = union_box(&a, &b);
        ensure!(u.contains(&a) && u.contains(&b), "case {case}: union misses a box");
        ensure!(
            u.x == a.x.min(b.x) && u.y == a.y.min(b.y) && u.x1() == a.x1().max(b.x1()) && u.y1() == a.y1().max(b.y1()),
            "case {case}: union not tight"
        );
        ensure!(u == union_box(&b, &a), "case {case}: union not symmetric");

        let f = rng.random_range(0.0..1.0);
        let e = expand_and_clamp(&u, f, w, h);
        ensure!(
            e.x >= 0.0 && e.y >= 0.0 && e.x1() <= w as f64 && e.y1() <= h as f64,
            "case {case}: expansion leaves the image"
        );
        ensure!(e.contains(&u.clamp_to(w as f64, h as f64)), "case {case}: expansion lost the union");

        let ratio = size_ratio(&a, &b);
        let (ca, cb) = (cells(&a).len() as f64, cells(&b).len() as f64);
        ensure!(ratio == size_ratio(&b, &a), "case {case}: ratio not symmetric");
        ensure!((ratio - ca.min(cb) / ca.max(cb)).abs() < 1e-12, "case {case}: ratio {ratio}");

        let s = separation(&a, &b, w, h);
        ensure!(s == separation(&b, &a, w, h), "case {case}: separation not symmetric");
        let want = brute_gap(&a, &b) / w.max(h) as f64;
        ensure!((s - want).abs() < 1e-9, "case {case}: separation {s} want {want}");
        ensure!(v == 0.0 || s == 0.0, "case {case}: overlapping boxes apart");
    }
    Ok(())
}

fn run_generation(
    ds: &SceneGraphDataset,
    store: &ImageStore,
    ledger: &Path,
    out: &Path,
    limits: RunLimits,
) -> Result<(), String> {
    let vlm = MockProvider::vlm();
    let mut l = if ledger.exists() {
        Ledger::resume(ledger)
    } else {
        Ledger::create(ledger)
    }
    .map_err(|e| e.to_string())?;
    let outcome = generate_dataset(ds, store, &vlm, &GenerationConfig::default(), &mut l, limits)
        .map_err(|e| e.to_string())?;
    save_dataset(&outcome.dataset, out).map_err(|e| e.to_string())
}

fn pipeline_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ds, store) = synth_fixture(50, 11, dir.path());
    let p = |n: &str| dir.path().join(n);

    run_generation(&ds, &store, &p("a.ledger"), &p("a.sg"), RunLimits::default())?;
    run_generation(&ds, &store, &p("b.ledger"), &p("b.sg"), RunLimits::default())?;
    run_generation(&ds, &store, &p("c.ledger"), &p("c.sg"), RunLimits { max_images: Some(17) })?;
    run_generation(&ds, &store, &p("c.ledger"), &p("c.sg"), RunLimits::default())?;
    let read = |n: &str| std::fs::read(p(n)).unwrap();
    ensure!(read("a.sg") == read("b.sg"), "datasets differ between runs");
    ensure!(read("a.ledger") == read("b.ledger"), "ledgers differ between runs");
    ensure!(read("a.sg") == read("c.sg"), "resumed dataset differs");
    ensure!(read("a.ledger") == read("c.ledger"), "resumed ledger differs");

    let blocklist = Blocklist::default();
    let generated = relscore_core::model::load_dataset(&p("a.sg"), relscore_core::model::DatasetFormat::Canonical)
        .map_err(|e| e.to_string())?;
    let mut accepted = 0;
    for img in generated.images() {
        for r in &img.relations {
            accepted += 1;
            ensure!(r.provenance == Provenance::Generated, "relation without generated provenance");
            let words = r.predicate.split_whitespace().count();
            ensure!((1..=5).contains(&words), "'{}' has {words} words", r.predicate);
            ensure!(blocklist.hit(&r.predicate).is_none(), "'{}' is blocklisted", r.predicate);
            let (s, o) = (img.object(r.subject_id).unwrap(), img.object(r.object_id).unwrap());
            ensure!(iou(&s.bbox, &o.bbox) > 0.0, "{}: pair {}->{} disjoint", img.image_id, s.id, o.id);
        }
    }
    ensure!(accepted > 0, "nothing accepted");

    let text = String::from_utf8(read("a.ledger")).unwrap();
    let mut per_image: BTreeMap<String, usize> = BTreeMap::new();
    for line in text.lines() {
        let rec: GenerationRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        *per_image.entry(rec.pair_key.image_id.clone()).or_default() += 1;
        let img = ds.image(&rec.pair_key.image_id).ok_or("ledger names an unknown image")?;
        let (s, o) = (img.object(rec.pair_key.subject_id).unwrap(), img.object(rec.pair_key.object_id).unwrap());
        ensure!(iou(&s.bbox, &o.bbox) > 0.0, "attempted a disjoint pair");
        if rec.status == GenerationStatus::Accepted {
            let pred = rec.predicate.as_deref().unwrap_or("");
            ensure!(!pred.is_empty() && pred.split_whitespace().count() <= 5, "accepted '{pred}'");
            ensure!(blocklist.hit(pred).is_none(), "accepted blocklisted '{pred}'");
        }
    }
    let worst = per_image.values().copied().max().unwrap_or(0);
    ensure!(worst <= 50, "{worst} attempts on one image");
    Ok(())
}

fn area(b: &BBox<f64>) -> f64 {
    b.w * b.h
}

fn subset_correctness() -> Outcome {
    let ds = synthetic_dataset(&SynthSpec {
        images: 500,
        seed: 5,
        ..SynthSpec::default()
    });
    let thr = 0.2;
    let pool = pair_pool(&ds);
    ensure!(!pool.is_empty(), "empty pair pool");
    for kind in [SubsetKind::RatioLow, SubsetKind::RatioHigh, SubsetKind::Distant, SubsetKind::Intersecting] {
        // each defining predicate from first principles
        let defining = |key: &PairKey| -> bool {
            let img = ds.image(&key.image_id).unwrap();
            let (s, o) = (&img.object(key.subject_id).unwrap().bbox, &img.object(key.object_id).unwrap().bbox);
            let ix = (s.x1().min(o.x1()) - s.x.max(o.x)).max(0.0);
            let iy = (s.y1().min(o.y1()) - s.y.max(o.y)).max(0.0);
            let overlap = ix * iy > 0.0;
            let ratio = area(s).min(area(o)) / area(s).max(area(o));
            let gx = (s.x.max(o.x) - s.x1().min(o.x1())).max(0.0);
            let gy = (s.y.max(o.y) - s.y1().min(o.y1())).max(0.0);
            let gap = (gx * gx + gy * gy).sqrt() / img.width.max(img.height) as f64;
            match kind {
                SubsetKind::RatioLow => ratio < thr,
                SubsetKind::RatioHigh => ratio >= thr,
                SubsetKind::Intersecting => overlap,
                SubsetKind::Distant => !overlap && gap >= thr,
            }
        };
        let expected: Vec<&PairKey> = pool.iter().map(|g| &g.key).filter(|k| defining(k)).collect();
        ensure!(!expected.is_empty(), "{kind}: no qualifying pairs in the fixture");

        let mut all = SubsetSpec::new(kind, usize::MAX, 1);
        all.threshold = thr;
        let full = build_subset(&ds, &all).map_err(|e| e.to_string())?;
        ensure!(full.eligible == expected.len(), "{kind}: {} eligible, oracle {}", full.eligible, expected.len());
        ensure!(
            full.pairs.iter().eq(expected.iter().copied()),
            "{kind}: membership differs from the defining predicate"
        );

        let n = (expected.len() / 3).max(1);
        let spec = SubsetSpec { sample_size: n, ..all.clone() };
        let a = build_subset(&ds, &SubsetSpec { seed: 42, ..spec.clone() }).map_err(|e| e.to_string())?;
        let b = build_subset(&ds, &SubsetSpec { seed: 42, ..spec.clone() }).map_err(|e| e.to_string())?;
        ensure!(a.pairs == b.pairs, "{kind}: same seed, different sample");
        ensure!(a.pairs.len() == n, "{kind}: sampled {} of {n}", a.pairs.len());
        ensure!(a.pairs.iter().all(defining), "{kind}: sample member fails the predicate");
        let distinct: BTreeSet<_> = a.pairs.iter().collect();
        ensure!(distinct.len() == n, "{kind}: duplicate pairs in sample");
        if n > 3 && n < expected.len() {
            let c = build_subset(&ds, &SubsetSpec { seed: 43, ..spec }).map_err(|e| e.to_string())?;
            ensure!(c.pairs != a.pairs, "{kind}: seed has no effect");
        }
    }
    Ok(())
}

fn relscore() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relscore"));
    c.env("SOURCE_DATE_EPOCH", "0").env_remove("RELSCORE_ENDPOINT");
    c
}

fn report(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    serde_json::from_str::<Value>(&text).map_err(|e| e.to_string())
}

fn self_score() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ds, _) = synth_fixture(30, 3, dir.path());
    let data = dir.path().join("gt.sg");
    save_dataset(&ds, &data).map_err(|e| e.to_string())?;
    let out = dir.path().join("report.json");
    let status = relscore()
        .args(["score", "--dataset"])
        .arg(&data)
        .arg("--predictions")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(status.status.success(), "exit {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr));
    let r = &report(&out)?["report"];
    ensure!(r["precision"] == 100.0, "precision {}", r["precision"]);
    ensure!(r["not_admitted"] == 0, "{} relations not admitted", r["not_admitted"]);
    ensure!(
        r["relations_admitted"] == r["relations_total"] && r["relations_total"].as_u64() > Some(0),
        "admitted {} of {}",
        r["relations_admitted"],
        r["relations_total"]
    );
    Ok(())
}

/// Stands in for a remote contrastive model while the cache is filled.
struct Prewarm(MockProvider);

impl Provider for Prewarm {
    fn backend(&self) -> BackendName {
        BackendName::Negclip
    }
    fn embed_image(&self, crop: &ImagePayload) -> Result<EmbeddingVector, ProviderError> {
        self.0.embed_image(crop)
    }
    fn embed_text(&self, phrase: &str) -> Result<EmbeddingVector, ProviderError> {
        self.0.embed_text(phrase)
    }
    fn pair_score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError> {
        self.0.pair_score(crop, phrase)
    }
    fn generate_relation(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        self.0.generate_relation(request)
    }
}

fn offline_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ds, store) = synth_fixture(8, 21, dir.path());
    let data = dir.path().join("gt.sg");
    save_dataset(&ds, &data).map_err(|e| e.to_string())?;

    let cache = std::sync::Arc::new(ScoreCache::new());
    let warm = CachedProvider::new(Prewarm(MockProvider::new(ScoreMethod::CosineClamped)), cache.clone());
    let expected = score_predictions(&ds, &ds, &store, &warm, &MetricConfig::default()).map_err(|e| e.to_string())?;
    let cache_path = dir.path().join("scores.cache");
    cache.store(&cache_path).map_err(|e| e.to_string())?;

    let cfg = dir.path().join("offline.toml");
    std::fs::write(&cfg, "[endpoint]\nretry_budget = 0\ntimeout_secs = 2\n").map_err(|e| e.to_string())?;
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .and_then(|l| l.local_addr())
        .map_err(|e| e.to_string())?
        .port();
    let url = format!("http://127.0.0.1:{port}");
    let run = |cache: Option<&Path>, out: &Path| {
        let mut c = relscore();
        c.args(["score", "--backend", "negclip", "--endpoint", &url, "--dataset"])
            .arg(&data)
            .arg("--predictions")
            .arg(&data)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out);
        if let Some(p) = cache {
            c.arg("--cache").arg(p);
        }
        c.output()
    };

    let out = dir.path().join("cached.json");
    let o = run(Some(&cache_path), &out).map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "cached run exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    let r = &report(&out)?["report"];
    let want = expected.corpus.map(|c| c.value).unwrap_or(f64::NAN);
    let got = r["corpus"]["value"].as_f64().unwrap_or(f64::NAN);
    ensure!((got - want).abs() <= 1e-9, "cached corpus {got}, in-process {want}");
    ensure!(r["backend"] == "negclip", "backend {}", r["backend"]);

    let o = run(None, &dir.path().join("uncached.json")).map_err(|e| e.to_string())?;
    ensure!(o.status.code() == Some(3), "uncached run exit {:?}, want 3", o.status.code());
    Ok(())
}

// ---------------------------------------------------------------- runner

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 7] = [
        ("formula oracle (1000 score sets, theta for |L| <= 20)", Duration::from_secs(5), formula_oracle),
        ("penalty behaviour (all p <= 100, k <= p)", Duration::from_secs(1), penalty_behaviour),
        ("geometry against raster and brute-force oracles", Duration::from_secs(5), geometry_suite),
        ("generation determinism and resume (50 images)", Duration::from_secs(30), pipeline_determinism),
        ("subset membership and seeded sampling (500 images)", Duration::from_secs(10), subset_correctness),
        ("self-score through the CLI", Duration::from_secs(10), self_score),
        ("scoring offline from the cache, no model server", Duration::from_secs(30), offline_suite),
    ];
    let mut failed = 0;
    for (name, bound, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let elapsed = start.elapsed();
        let result = result.and_then(|()| {
            if elapsed > bound {
                Err(format!("took {elapsed:.2?}, bound {bound:?}"))
            } else {
                Ok(())
            }
        });
        match result {
            Ok(()) => println!("PASS  {name}  ({elapsed:.2?}, bound {bound:?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}  ({elapsed:.2?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
