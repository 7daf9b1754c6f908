//! Experiment front end that turns a TOML configuration into runs of the
//! incremental method or a baseline and writes their CSV/JSON artifacts.

pub mod config;
pub mod experiment;
pub mod metrics;

use std::path::Path as FsPath;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::trainer::TrainerError;

pub use config::{
    emit_config, parse_config, parse_config_str, DatasetConfig, ExperimentConfig, GammaRuleName,
    MemorySection, NetworkSection, OutputSection, TrainerSection,
};
pub use experiment::{
    execute, execute_on, load_stream, run_baseline_finetune, run_baseline_joint, run_experiment,
    run_experiment_with, write_artifacts, RunOutcome,
};
pub use metrics::{confusion_csv, emit_metrics, metrics_csv, MetricsTable, MetricsTableRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("output error: {0}")]
    Output(String),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl HarnessError {
    pub(crate) fn io(path: &FsPath, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
