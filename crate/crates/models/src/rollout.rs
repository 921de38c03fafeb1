//! Euler integration of the learned flow with the context block clamped.

use rand::Rng;
use rand_distr::StandardNormal;
use scar_core::nn::Ctx;
use scar_core::rng::Stream;
use scar_core::{ParamStore, Tape, Tensor};

use crate::error::ModelError;
use crate::fdm::{Cond, Fdm};

/// Generates `f − f_hist` future tokens per episode.
///
/// `context`: `b·f_hist` clean rows; `cond`: `[b·f, cond_width]` or `None`
/// for the action-free model. Future tokens start from noise drawn from
/// `noise` and move from `τ = 1` to `τ = 0` in `n_steps` equal Euler steps;
/// context rows are rewritten with the clean values before every step and
/// enter with `τ = 0`. Returns all `b·f` rows.
#[allow(clippy::too_many_arguments)]
pub fn rollout_generate(
    fdm: &Fdm,
    store: &ParamStore,
    context: &[f64],
    cond: Option<&Tensor>,
    b: usize,
    f: usize,
    f_hist: usize,
    n_steps: usize,
    noise: &mut Stream,
) -> Result<Vec<f64>, ModelError> {
    let d = fdm.d_v;
    if context.len() != b * f_hist * d {
        return Err(ModelError::Misaligned {
            expected: b * f_hist * d,
            got: context.len(),
        });
    }
    if n_steps == 0 {
        return Err(scar_core::TensorError::Invalid("rollout needs at least one step".into()).into());
    }
    let mut x = vec![0.0; b * f * d];
    for ep in 0..b {
        for k in 0..f {
            let row = &mut x[(ep * f + k) * d..(ep * f + k + 1) * d];
            if k < f_hist {
                row.copy_from_slice(&context[(ep * f_hist + k) * d..(ep * f_hist + k + 1) * d]);
            } else {
                row.iter_mut().for_each(|v| *v = noise.sample(StandardNormal));
            }
        }
    }
    let dt = 1.0 / n_steps as f64;
    for step in 0..n_steps {
        let level = 1.0 - step as f64 * dt;
        let tau: Vec<f64> = (0..b * f).map(|r| if r % f < f_hist { 0.0 } else { level }).collect();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store).with_frozen("fdm.");
        let c = match cond {
            Some(c) => Cond::Tokens(cx.constant(c)),
            None => Cond::None,
        };
        let vel = fdm
            .predict(&cx, cx.constant(&Tensor::matrix(b * f, d, x.clone())?), &tau, c, b)?
            .value();
        for r in 0..b * f {
            if r % f >= f_hist {
                for k in r * d..(r + 1) * d {
                    x[k] -= dt * vel[k];
                }
            }
        }
    }
    Ok(x)
}
