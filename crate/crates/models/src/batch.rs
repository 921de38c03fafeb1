//! Stacking episodes into dense batch tensors.

use scar_core::Tensor;
use scar_world::Trajectory;

use crate::config::ModelConfig;
use crate::error::ModelError;

/// Episodes stacked row-wise. Frame-rate tensors have `b·t` rows, token-rate
/// tensors `b·f` rows and transition tensors `b·(t−1)` rows.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub b: usize,
    pub t: usize,
    pub f: usize,
    pub frames: Tensor,
    pub tokens: Tensor,
    pub actions: Tensor,
    pub embodiments: Vec<usize>,
}

impl EpisodeBatch {
    pub fn new(episodes: &[&Trajectory], cfg: &ModelConfig) -> Result<Self, ModelError> {
        let t = cfg.t;
        let f = cfg.tokens();
        let b = episodes.len();
        let mut frames = Vec::with_capacity(b * t * cfg.d_v);
        let mut tokens = Vec::with_capacity(b * f * cfg.d_v);
        let mut actions = Vec::with_capacity(b * (t - 1) * cfg.d_a);
        for ep in episodes {
            if ep.t != t {
                return Err(ModelError::Misaligned { expected: t, got: ep.t });
            }
            frames.extend_from_slice(&ep.x);
            for k in 0..f {
                tokens.extend_from_slice(ep.x_row(k * cfg.stride));
            }
            actions.extend_from_slice(&ep.a);
        }
        Ok(EpisodeBatch {
            b,
            t,
            f,
            frames: Tensor::matrix(b * t, cfg.d_v, frames)?,
            tokens: Tensor::matrix(b * f, cfg.d_v, tokens)?,
            actions: Tensor::matrix(b * (t - 1), cfg.d_a, actions)?,
            embodiments: episodes.iter().map(|e| e.embodiment).collect(),
        })
    }

    /// Embodiment label of every transition row.
    pub fn transition_labels(&self) -> Vec<usize> {
        self.embodiments
            .iter()
            .flat_map(|&e| std::iter::repeat_n(e, self.t - 1))
            .collect()
    }
}
