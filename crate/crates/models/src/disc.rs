//! Embodiment discriminator behind a gradient reversal node.

use scar_core::nn::{Activation, Ctx, Mlp, MlpSpec};
use scar_core::rng::Stream;
use scar_core::{ParamStore, Var};

use crate::config::ModelConfig;
use crate::error::ModelError;

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub mlp: Mlp,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Stream) -> Result<Self, ModelError> {
        let spec = MlpSpec {
            widths: vec![cfg.d_z, cfg.disc_hidden, cfg.n_embodiments],
            activation: Activation::Gelu,
            init_scale: 1.0,
        };
        Ok(Discriminator {
            mlp: Mlp::new(store, "disc", &spec, rng)?,
        })
    }

    /// Per-token logits of `R_α(z)`.
    pub fn classify<'t>(&self, cx: &Ctx<'t, '_>, z: Var<'t>, alpha: f64) -> Var<'t> {
        self.mlp.forward(cx, z.grl(alpha))
    }

    /// Mean cross-entropy over all tokens.
    pub fn loss<'t>(&self, cx: &Ctx<'t, '_>, z: Var<'t>, labels: &[usize], alpha: f64) -> Result<Var<'t>, ModelError> {
        Ok(self.classify(cx, z, alpha).softmax_cross_entropy(labels)?)
    }
}
