//! Latent-action world model components and their training.
//!
//! An inverse dynamics model infers a stochastic latent action for every
//! transition; a forward dynamics model predicts future latent observations
//! by flow matching, conditioned on those latents through AdaLN. Optional KL
//! and gradient-reversal terms push the latents toward an embodiment-invariant
//! code. An action-to-latent controller maps raw commands back into that code.

pub mod a2l;
pub mod batch;
pub mod config;
pub mod disc;
pub mod error;
pub mod fdm;
pub mod flow;
pub mod idm;
pub mod model;
pub mod rollout;
pub mod train;

pub use a2l::{A2l, A2lMode};
pub use batch::EpisodeBatch;
pub use config::{ModelConfig, Schedule, TrainConfig, Variant};
pub use error::ModelError;
pub use flow::{diffusion_forcing_schedule, make_flow_target, FlowBatch};
pub use model::{CondSource, ScarModel};
pub use rollout::rollout_generate;
pub use train::{
    eval_rec_loss, pretrain_fdm, total_loss, train_a2l, train_scar, training_pool, A2lTrainConfig, LogRow,
    LossParts, TrainLog, TrainOutcome,
};
