use scar_core::{CheckpointError, ConfigError, TensorError};
use scar_world::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("sequence of length {0} is too short, need at least 2 tokens")]
    SequenceTooShort(usize),
    #[error("noise level {value} at index {index} outside [0, 1]")]
    TauRange { index: usize, value: f64 },
    #[error("conditioning has {got} tokens, latent timeline has {expected}")]
    Misaligned { expected: usize, got: usize },
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { step: usize, component: &'static str },
    #[error("loss {loss} exceeded 1e6 at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("training pool for {0} is empty")]
    EmptyPool(String),
    #[error("`{value}` is not a known value for {key}")]
    UnknownName { key: &'static str, value: String },
    #[error("checkpoint lacks parameters under {0}")]
    MissingComponent(String),
}
