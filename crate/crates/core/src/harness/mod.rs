//! Corpus, configuration, training, checkpoints, evaluation and probes.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod metrics;
pub mod probe;
pub mod train;

use std::path::Path;

use crate::diagnostics::DiagnosticsError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("non-finite loss at step {step}; last good checkpoint kept")]
    NonFinite { step: u64 },
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("layer {layer} outside 0..{n}")]
    LayerOutOfRange { layer: usize, n: usize },
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a failed run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::KOutOfRange { .. } | HarnessError::LayerOutOfRange { .. }
        )
    }
}
