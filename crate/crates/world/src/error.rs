use scar_core::CheckpointError;
use scar_core::ConfigError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("unknown embodiment {0}")]
    UnknownEmbodiment(String),
    #[error("invalid data-generating process: {0}")]
    InvalidSpec(String),
    #[error("vMF concentration must be non-negative, got {0}")]
    NegativeKappa(f64),
    #[error("vMF center must be a unit vector (norm {0})")]
    NotUnit(f64),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
