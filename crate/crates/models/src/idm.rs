//! Inverse dynamics model: per-transition diagonal Gaussian posterior.

use scar_core::nn::{Activation, Ctx, Mlp, MlpSpec};
use scar_core::rng::Stream;
use scar_core::{concat_cols, ParamStore, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::ModelError;

pub struct Posterior<'t> {
    pub mu: Var<'t>,
    pub log_sigma: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Idm {
    pub mlp: Mlp,
    pub d_v: usize,
    pub d_z: usize,
}

impl Idm {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Stream) -> Result<Self, ModelError> {
        let spec = MlpSpec {
            widths: vec![2 * cfg.d_v, cfg.idm_hidden, cfg.idm_hidden, 2 * cfg.d_z],
            activation: Activation::Gelu,
            init_scale: 1.0,
        };
        Ok(Idm {
            mlp: Mlp::new(store, "idm", &spec, rng)?,
            d_v: cfg.d_v,
            d_z: cfg.d_z,
        })
    }

    /// `frames`: `[b·t, d_v]`. Returns `(μ, log σ)` for the `t−1` transitions
    /// of every episode, each `[b·(t−1), d_z]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, frames: Var<'t>, b: usize, t: usize) -> Result<Posterior<'t>, ModelError> {
        if t < 2 {
            return Err(ModelError::SequenceTooShort(t));
        }
        if frames.rows() != b * t {
            return Err(ModelError::Misaligned {
                expected: b * t,
                got: frames.rows(),
            });
        }
        let mut now = Vec::with_capacity(b * (t - 1));
        let mut next = Vec::with_capacity(b * (t - 1));
        for ep in 0..b {
            for i in 0..t - 1 {
                now.push(ep * t + i);
                next.push(ep * t + i + 1);
            }
        }
        let x = concat_cols(&[frames.select_rows(&now), frames.select_rows(&next)]);
        let out = self.mlp.forward(cx, x);
        Ok(Posterior {
            mu: out.slice_cols(0, self.d_z),
            log_sigma: out.slice_cols(self.d_z, 2 * self.d_z),
        })
    }

    /// Posterior means without recording gradients.
    pub fn means(&self, store: &ParamStore, frames: &Tensor, b: usize, t: usize) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store).with_frozen("idm.");
        Ok(self.forward(&cx, cx.constant(frames), b, t)?.mu.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scar_core::rng::stream;

    #[test]
    fn output_shape_and_short_sequence() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let idm = Idm::new(&mut store, &cfg, &mut stream(0, "idm")).unwrap();
        let frames = Tensor::zeros(&[2 * 17, 12]);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let p = idm.forward(&cx, cx.constant(&frames), 2, 17).unwrap();
        assert_eq!(p.mu.shape(), vec![32, 8]);
        assert_eq!(p.log_sigma.shape(), vec![32, 8]);
        let one = Tensor::zeros(&[1, 12]);
        assert!(matches!(
            idm.forward(&cx, cx.constant(&one), 1, 1),
            Err(ModelError::SequenceTooShort(1))
        ));
    }

    #[test]
    fn random_weights_separate_inputs() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let idm = Idm::new(&mut store, &cfg, &mut stream(1, "idm")).unwrap();
        let a = Tensor::matrix(2, 12, (0..24).map(|i| i as f64 * 0.05).collect()).unwrap();
        let b = Tensor::matrix(2, 12, (0..24).map(|i| -(i as f64) * 0.03).collect()).unwrap();
        let ma = idm.means(&store, &a, 1, 2).unwrap();
        let mb = idm.means(&store, &b, 1, 2).unwrap();
        assert!(ma.iter().zip(&mb).any(|(x, y)| (x - y).abs() > 1e-3));
    }
}
