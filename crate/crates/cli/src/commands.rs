use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use relscore_core::imaging::ImageStore;
use relscore_core::metrics::{alignment_study, score_predictions_within};
use relscore_core::model::{load_dataset, save_dataset, DatasetFormat, PairKey, SceneGraphDataset};
use relscore_core::pipeline::{
    build_subset, generate_dataset, read_pair_list, render_prompts, write_pair_list, Ledger, RunLimits, SubsetKind,
    SubsetSpec,
};
use relscore_core::stats::dataset_stats;
use relscore_core::synth::{synthetic_dataset, write_images, SynthSpec};
use serde::Serialize;

use crate::backend::Purpose;
use crate::config::ToolConfig;
use crate::error::CliError;
use crate::manifest::{write_report, RunManifest};
use crate::{AlignArgs, DatasetArgs, GenerateArgs, ScoreArgs, StatsArgs, SubsetArgs, SynthArgs};

struct Loaded {
    dataset: SceneGraphDataset,
    store: ImageStore,
}

fn load(args: &DatasetArgs) -> Result<Loaded, CliError> {
    let format: DatasetFormat = args.format.parse().map_err(CliError::Input)?;
    let dataset = load_dataset(&args.dataset, format)?;
    let root = match &args.image_root {
        Some(r) => r.clone(),
        None => args
            .dataset
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    Ok(Loaded {
        dataset,
        store: ImageStore::new(root),
    })
}

fn manifest(command: &str, cfg: &ToolConfig, config_path: Option<&Path>) -> Result<RunManifest, CliError> {
    let mut m = RunManifest::new(command, cfg);
    if let Some(p) = config_path {
        m.input("config", p)?;
    }
    Ok(m)
}

fn emit<R: Serialize>(out: Option<&Path>, manifest: &RunManifest, report: &R) -> Result<(), CliError> {
    match out {
        Some(path) => write_report(path, manifest, report),
        None => {
            #[derive(Serialize)]
            struct Envelope<'a, R> {
                manifest: &'a RunManifest,
                report: &'a R,
            }
            let s = serde_json::to_string_pretty(&Envelope { manifest, report })
                .map_err(|e| CliError::Internal(e.to_string()))?;
            println!("{s}");
            Ok(())
        }
    }
}

/// Keeps only relations on listed pairs, and only images that have one.
fn restrict(dataset: &SceneGraphDataset, pairs: &BTreeSet<PairKey>) -> Result<SceneGraphDataset, CliError> {
    let images = dataset
        .images()
        .iter()
        .filter_map(|img| {
            let mut img = img.clone();
            img.relations
                .retain(|r| pairs.contains(&PairKey::new(img.image_id.clone(), r.subject_id, r.object_id)));
            (!img.relations.is_empty()).then_some(img)
        })
        .collect();
    Ok(SceneGraphDataset::new(dataset.name.clone(), images)?)
}

pub fn score(args: ScoreArgs) -> Result<(), CliError> {
    let cfg = ToolConfig::load(args.config.as_deref())?;
    cfg.metric.validate()?;
    let gt = load(&args.data)?;
    let preds = load_dataset(&args.predictions, DatasetFormat::Canonical)?;
    let subset = args.subset.as_deref().map(read_pair_list).transpose()?;
    let backend = args
        .backend
        .build(Purpose::Scoring, &cfg.endpoint, Some((&gt.dataset, &gt.store, &cfg.metric)))?;
    let report = score_predictions_within(
        &preds,
        &gt.dataset,
        &gt.store,
        &backend.provider,
        &cfg.metric,
        subset.as_ref(),
    )?;
    backend.finish()?;

    let mut m = manifest("score", &cfg, args.config.as_deref())?;
    m.input("groundtruth", &args.data.dataset)?;
    m.input("predictions", &args.predictions)?;
    if let Some(p) = &args.subset {
        m.input("subset", p)?;
    }
    m.backend = Some(report.backend.clone());
    emit(args.out.as_deref(), &m, &report)?;
    if args.out.is_some() {
        let corpus = report
            .corpus
            .map_or("n/a".to_string(), |c| format!("{:.2} over {} images ({} skipped)", c.value, c.images_scored, c.images_skipped));
        println!("score: {corpus}");
        if let Some(r) = report.ref_corpus {
            println!("reference-augmented score: {r:.2}");
        }
        println!(
            "precision: {:.2}; admitted {}/{} relations",
            report.precision, report.relations_admitted, report.relations_total
        );
    }
    Ok(())
}

pub fn align(args: AlignArgs) -> Result<(), CliError> {
    let cfg = ToolConfig::load(args.config.as_deref())?;
    cfg.metric.validate()?;
    let mut data = load(&args.data)?;
    if let Some(p) = &args.subset {
        data.dataset = restrict(&data.dataset, &read_pair_list(p)?)?;
    }
    let backend = args
        .backend
        .build(Purpose::Scoring, &cfg.endpoint, Some((&data.dataset, &data.store, &cfg.metric)))?;
    let report = alignment_study(&data.dataset, &data.store, &backend.provider, &cfg.metric)?;
    backend.finish()?;

    let mut m = manifest("align", &cfg, args.config.as_deref())?;
    m.input("dataset", &args.data.dataset)?;
    if let Some(p) = &args.subset {
        m.input("subset", p)?;
    }
    m.backend = Some(report.backend.clone());
    emit(args.out.as_deref(), &m, &report)?;
    if args.out.is_some() {
        println!(
            "theta: {:.2}; precision: {:.2}; raw score: {:.2}; relations: {}",
            report.mean_theta * cfg.metric.report_scale,
            report.precision,
            report.mean_raw_score,
            report.relations_evaluated
        );
        for c in report.confusions.iter().take(args.top) {
            println!("  {:>5}  <{}> lost to <{}>", c.count, c.groundtruth, c.preferred);
        }
    }
    Ok(())
}

pub fn subset(args: SubsetArgs) -> Result<(), CliError> {
    let cfg = ToolConfig::load(args.config.as_deref())?;
    let data = load(&args.data)?;
    let kind: SubsetKind = args.kind.parse()?;
    let spec = SubsetSpec {
        kind,
        threshold: args.threshold.unwrap_or(cfg.subset.threshold),
        sample_size: args.sample_size.unwrap_or(cfg.subset.sample_size),
        seed: args.seed.or(cfg.seed).unwrap_or(0),
    };
    let selection = build_subset(&data.dataset, &spec)?;
    write_pair_list(&args.out, &selection.pairs)?;
    if let Some(report) = &args.report {
        let mut m = manifest("subset", &cfg, args.config.as_deref())?;
        m.input("dataset", &args.data.dataset)?;
        m.seed = Some(spec.seed);
        write_report(report, &m, &selection)?;
    }
    println!(
        "{}: wrote {} pairs ({} qualifying of {})",
        kind,
        selection.pairs.len(),
        selection.eligible,
        selection.pool_size
    );
    Ok(())
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = ToolConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed.or(cfg.seed) {
        cfg.generation.seed = seed;
    }
    let data = load(&args.data)?;
    if args.dry_run {
        let n = render_prompts(&data.dataset, &data.store, &cfg.generation, &args.out)?;
        println!("rendered {n} prompts into {}", args.out.display());
        return Ok(());
    }
    let backend = args.backend.build(Purpose::Generation, &cfg.endpoint, None)?;
    let ledger_path = args.ledger.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".ledger.jsonl");
        PathBuf::from(p)
    });
    let mut ledger = if args.resume {
        Ledger::resume(&ledger_path)?
    } else {
        Ledger::create(&ledger_path)?
    };
    let limits = RunLimits {
        max_images: args.limit_images,
    };
    let outcome = generate_dataset(
        &data.dataset,
        &data.store,
        &backend.provider,
        &cfg.generation,
        &mut ledger,
        limits,
    )?;
    save_dataset(&outcome.dataset, &args.out)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", args.out.display())))?;
    if let Some(report) = &args.report {
        let mut m = manifest("generate", &cfg, args.config.as_deref())?;
        m.input("dataset", &args.data.dataset)?;
        m.backend = Some(backend.provider.identity());
        m.seed = Some(cfg.generation.seed);
        write_report(report, &m, &outcome.summary)?;
    }
    let s = &outcome.summary;
    println!(
        "{} images, {} attempts ({} from the ledger), {} relations kept",
        s.images,
        s.attempted,
        s.reused,
        outcome.dataset.relation_count()
    );
    for (status, n) in &s.by_status {
        println!("  {status}: {n}");
    }
    Ok(())
}

pub fn stats(args: StatsArgs) -> Result<(), CliError> {
    let data = load(&args.data)?;
    let report = dataset_stats(&data.dataset, args.top_k);
    let mut m = RunManifest::new("stats", &ToolConfig::default());
    m.input("dataset", &args.data.dataset)?;
    emit(args.out.as_deref(), &m, &report)?;
    if args.out.is_some() {
        println!(
            "{} images, {} objects, {} triplets, {} predicates, {:.2} relations per image",
            report.images, report.objects, report.triplets, report.distinct_predicates, report.mean_relations_per_image
        );
        for p in &report.top_k {
            println!("  {:>8}  {}", p.count, p.predicate);
        }
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        images: args.images,
        seed: args.seed,
        width: args.width,
        height: args.height,
        relations_per_image: args.relations_per_image,
        ..SynthSpec::default()
    };
    let ds = synthetic_dataset(&spec);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", args.out.display())))?;
    write_images(&ds, &args.out).map_err(|e| CliError::Internal(e.to_string()))?;
    let path = args.out.join("dataset.sg");
    save_dataset(&ds, &path).map_err(|e| CliError::Internal(e.to_string()))?;
    println!(
        "wrote {} images with {} relations to {}",
        ds.images().len(),
        ds.relation_count(),
        path.display()
    );
    Ok(())
}
