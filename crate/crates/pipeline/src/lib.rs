//! Evaluation runs: per frame, overlay the label map, build the prompt,
//! sample several replies, parse and integrate them, aggregate and score.

use std::path::PathBuf;

use offemma_backend::BackendError;
use offemma_core::consistency::ConsistencyError;
use offemma_core::dataset::DatasetError;
use offemma_core::metrics::MetricsError;
use offemma_core::prompting::PromptError;
use offemma_core::visual_prompt::VisualPromptError;
use thiserror::Error;

pub mod config;
pub mod report;
pub mod run;
pub mod synth;

pub use config::{BackendConfig, RunConfig};
pub use run::{compare_single_vs_sc, run_eval, FrameRecord, PairedReport, RunReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("every backend request failed; first error: {0}")]
    AllBackendsFailed(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("frame {frame}: {source}")]
    VisualPrompt {
        frame: String,
        #[source]
        source: VisualPromptError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
