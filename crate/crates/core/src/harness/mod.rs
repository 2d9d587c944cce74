//! Training loop, schedules, run orchestration and result statistics.

mod config;
mod orchestrate;
mod schedule;
pub mod stats;
mod train;

pub use config::{apply_override, DataConfig, RunConfig, TrainConfig};
pub use orchestrate::{
    cell_label, factorial, factorial_grid, run_all, sweep, sweep_grid, CellSpec, FactorialSpec, RunRecord, SweepKind,
    SweepReport, SweepRow, sweep_report,
};
pub use schedule::Schedule;
pub use stats::{bootstrap_ci, gap_report, BootstrapConfig, CellResult, GapReport, Interval};
pub use train::{
    read_summary, train, Checkpoint, MetricsRow, RunOutcome, RunStatus, RunSummary, TrainOptions, METRICS_HEADER,
};

use crate::corpus::CorpusError;
use crate::diagnostics::DiagError;
use crate::optim::OptimError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("statistics: {0}")]
    Stats(String),
    #[error("{0}")]
    Run(String),
}

impl HarnessError {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io { .. } => "io",
            HarnessError::Tensor(_) => "tensor",
            HarnessError::Corpus(_) => "corpus",
            HarnessError::Diag(_) => "diagnostics",
            HarnessError::Optim(_) => "optimizer",
            HarnessError::Serde(_) => "serialization",
            HarnessError::Stats(_) => "statistics",
            HarnessError::Run(_) => "run",
        }
    }
}
