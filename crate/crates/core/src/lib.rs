//! Dense `f64` tensors with tape-based reverse-mode differentiation, AdamW,
//! binary checkpoints, seeded random streams and small neural blocks.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{CheckpointError, TensorError};
pub use config::{Config, ConfigError};
pub use tape::{concat_cols, concat_rows, Grads, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
