use std::path::PathBuf;

use scar_core::{CheckpointError, ConfigError, TensorError};
use scar_eval::EvalError;
use scar_models::ModelError;
use scar_theory::TheoryError;
use scar_world::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing input: {0}")]
    Missing(String),
    #[error("{file}: {source}")]
    Config {
        file: String,
        #[source]
        source: ConfigError,
    },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Short category for the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        let config = |e: &ConfigError| match e {
            ConfigError::Contradiction(_) => "contradiction",
            _ => "config",
        };
        match self {
            CliError::Io { .. } => "io",
            CliError::Missing(_) => "missing-input",
            CliError::Config { source, .. } => config(source),
            CliError::World(WorldError::Config(c)) | CliError::Model(ModelError::Config(c)) => config(c),
            CliError::World(WorldError::InvalidSpec(_)) => "config",
            CliError::Model(ModelError::UnknownName { .. }) => "config",
            CliError::World(_) => "data",
            CliError::Model(_) => "model",
            CliError::Eval(_) => "eval",
            CliError::Theory(_) => "theory",
            CliError::Checkpoint(_) | CliError::Tensor(_) => "checkpoint",
            CliError::Json(_) => "json",
            CliError::Usage(_) => "usage",
        }
    }

    /// One line of JSON: `{"error": kind, "message": text}`.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}
