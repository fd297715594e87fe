//! `relscore`: score scene-graph predictions, study metric alignment, build
//! ablation subsets, generate synthetic relations and summarise datasets.

mod backend;
mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::backend::BackendArgs;

#[derive(Debug, Parser)]
#[command(name = "relscore", version, about = "Reference-free relation scoring for scene graphs")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score predicted scene graphs against groundtruth regions.
    Score(ScoreArgs),
    /// Rank each annotated predicate among the predicates seen for its class pair.
    Align(AlignArgs),
    /// Sample relation pairs by box ratio, overlap or distance.
    Subset(SubsetArgs),
    /// Prompt a VLM about overlapping object pairs and keep the filtered answers.
    Generate(GenerateArgs),
    /// Counts, predicate histogram and long-tail curve of a dataset.
    Stats(StatsArgs),
    /// Write a seeded synthetic dataset with noise images.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// canonical, psg or coco.
    #[arg(long, default_value = "canonical")]
    pub format: String,
    /// Directory image paths are relative to (default: the dataset's directory).
    #[arg(long)]
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Predicted scene graphs in canonical format.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Restrict scoring to the pairs in this list.
    #[arg(long)]
    pub subset: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub subset: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Confusions listed in the summary.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct SubsetArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// ratio_low, ratio_high, intersecting or distant.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pair list to write, one JSON object per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional report with counts and the manifest.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generated dataset, or the prompt directory with --dry-run.
    #[arg(long)]
    pub out: PathBuf,
    /// Attempt ledger (default: <out>.ledger.jsonl).
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// Continue from an existing ledger.
    #[arg(long)]
    pub resume: bool,
    /// Render prompts only; no backend calls.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Stop after this many images.
    #[arg(long, hide = true)]
    pub limit_images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 96)]
    pub width: u32,
    #[arg(long, default_value_t = 72)]
    pub height: u32,
    #[arg(long, default_value_t = 4)]
    pub relations_per_image: usize,
    /// Output directory; receives dataset.sg and images/.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Score(a) => commands::score(a),
        Command::Align(a) => commands::align(a),
        Command::Subset(a) => commands::subset(a),
        Command::Generate(a) => commands::generate(a),
        Command::Stats(a) => commands::stats(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
