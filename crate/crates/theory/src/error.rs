use scar_core::TensorError;
use scar_eval::EvalError;
use scar_world::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("basis is rank deficient: {0}")]
    RankDeficient(String),
    #[error("encoder rank collapsed below d_z (smallest singular value ratio {0:.2e})")]
    RankCollapse(f64),
    #[error("joint IDM/FDM training ended at reconstruction loss {0:.3e}, above 1e-3; the lemma's premise is unmet")]
    PremiseUnmet(f64),
}
