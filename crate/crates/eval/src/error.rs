use scar_core::TensorError;
use scar_models::ModelError;
use scar_world::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("frame count or size mismatch: {0}")]
    SizeMismatch(String),
    #[error("frame classifier validation accuracy {0:.3} is below 0.9; leakage would be unreliable")]
    UnreliableClassifier(f64),
    #[error("not enough data: {0}")]
    NotEnoughData(String),
}
