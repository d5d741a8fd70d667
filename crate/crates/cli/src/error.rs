use std::path::Path;

use thiserror::Error;

use ciw_annotate::StoreError;
use ciw_core::dataset::DatasetError;
use ciw_core::ensemble::EnsembleError;
use ciw_core::eval::EvalError;
use ciw_core::lm::LmError;
use ciw_core::optimizer::OptimizerError;
use ciw_core::program::ProgramError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    RunDir(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Annotate(#[from] StoreError),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::RunDir(_) => "run-dir",
            CliError::Io { .. } => "io",
            CliError::Dataset(_) => "dataset",
            CliError::Lm(_) => "lm",
            CliError::Program(ProgramError::Lm(_)) => "lm",
            CliError::Program(_) => "program",
            CliError::Optimizer(_) => "optimizer",
            CliError::Ensemble(_) => "ensemble",
            CliError::Eval(_) => "eval",
            CliError::Annotate(_) => "annotate",
        }
    }
}
