//! Experimental procedures built on top of the metrics: ablation subsets,
//! region prompts and synthetic relation generation.

mod filter;
mod generate;
mod prompt;
mod subset;

use std::path::PathBuf;

pub use filter::{postprocess, Blocklist, Filtered, GenerationStatus, DEFAULT_BLOCKLIST, DEFAULT_MAX_WORDS};
pub use generate::{
    generate_dataset, render_prompts, select_candidate_pairs, GenerationConfig, GenerationOutcome, GenerationRecord,
    GenerationSummary, Ledger, RunLimits,
};
pub use prompt::{
    build_prompt, load_mask_pair, render_template, OverlaySpec, PromptArtifact, RenderedPrompt,
    DEFAULT_PROMPT_TEMPLATE, OBJECT_ALIAS, SUBJECT_ALIAS,
};
pub use subset::{
    build_subset, pair_pool, read_pair_list, write_pair_list, PairGeometry, SubsetKind, SubsetSelection, SubsetSpec,
    DEFAULT_SUBSET_THRESHOLD,
};

use crate::imaging::ImagingError;
use crate::model::DatasetError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no pair qualifies for the {0} subset")]
    NoEligiblePairs(SubsetKind),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("ledger {0} already has records; resume it or choose another path")]
    LedgerExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}
