//! Configuration, orchestration and persistence for pre-training and
//! evaluation runs.

use std::path::PathBuf;

use thiserror::Error;

use crate::eval::EvalError;
use crate::trainer::{CheckpointError, TrainError};

mod config;
mod gradcheck;
mod metrics;
mod pipeline;
mod report;

pub use config::{
    parse_config, ConfigError, EvalSection, ExperimentConfig, ExperimentSection, ScheduleSection, TaskEntry,
    DEFAULT_CHECKPOINTS,
};
pub use gradcheck::{grad_check_tasks, TaskGradReport};
pub use metrics::{append_records, read_records, MetricsRecord};
pub use pipeline::{
    checkpoint_paths, eval_checkpoints, load_config, pretrain, simulate_schedule, PretrainSummary, CHECKPOINT_DIR,
    CONFIG_ECHO, EVAL_DIR, METRICS_FILE, PARTIAL_MARKER,
};
pub use report::{render_report, ReportFiles, CURVES_FILE, REPORT_FILE};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let path = path.into();
    move |source| ExperimentError::Io { path, source }
}
