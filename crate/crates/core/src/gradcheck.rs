//! Finite-difference validation of the tape's analytic gradients.
//!
//! Differences use the fourth-order central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`; the error reported for
//! each coordinate is `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.

use rand::seq::index::sample;

use crate::error::TensorError;
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

fn rel_err(a: f64, c: f64) -> f64 {
    (a - c).abs() / (a.abs() + c.abs() + 1e-8)
}

fn stencil(mut eval: impl FnMut(f64) -> Result<f64, TensorError>, h: f64) -> Result<f64, TensorError> {
    let p2 = eval(2.0 * h)?;
    let p1 = eval(h)?;
    let m1 = eval(-h)?;
    let m2 = eval(-2.0 * h)?;
    // differences first, so coordinates that do not influence f give exactly 0
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn checked<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>, TensorError> {
    if let Some((node, op)) = tape.first_non_finite() {
        return Err(TensorError::NonFinite { node, op });
    }
    if out.shape().iter().product::<usize>() != 1 {
        return Err(TensorError::Invalid(format!(
            "gradcheck needs a scalar output, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out)
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with step `eps`, over every coordinate of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    gradcheck_scaled(f, x, eps, 1.0)
}

/// Compares the tape gradient against `scale` times the central difference.
///
/// When every path from input to output passes through one gradient reversal
/// node of strength `α`, the tape gradient is `−α` times the derivative of the
/// forward value, so `scale = −α` checks it.
pub fn gradcheck_scaled<F>(f: F, x: &Tensor, eps: f64, scale: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid("gradcheck step must be positive".into()));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x);
    let out = checked(&tape, f(&tape, xv)?)?;
    let grads = tape.backward(out);
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let numeric = stencil(
            |d| {
                let mut xp = x.clone();
                xp.data_mut()[i] += d;
                let t = Tape::new();
                let v = t.leaf(&xp);
                let o = f(&t, v)?;
                Ok(checked(&t, o)?.item())
            },
            eps,
        )?;
        worst = worst.max(rel_err(analytic[i], scale * numeric));
    }
    Ok(worst)
}

/// Like [`gradcheck`], but differentiates with respect to parameters in a
/// store. At most `max_coords` coordinates per parameter are probed, chosen
/// with `rng`.
pub fn gradcheck_params<F>(
    f: F,
    store: &ParamStore,
    params: &[ParamId],
    eps: f64,
    max_coords: usize,
    rng: &mut Stream,
) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, TensorError>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid("gradcheck step must be positive".into()));
    }
    let tape = Tape::new();
    let out = checked(&tape, f(&tape, store)?)?;
    let grads = tape.backward(out);
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    grads.write_params(&tape, &mut with_grads);

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for &id in params {
        let n = store.get(id).numel();
        let analytic = with_grads
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        };
        for i in coords {
            let base = store.get(id).data()[i];
            let numeric = stencil(
                |d| {
                    probe.get_mut(id).data_mut()[i] = base + d;
                    let t = Tape::new();
                    let o = f(&t, &probe)?;
                    Ok(checked(&t, o)?.item())
                },
                eps,
            )?;
            probe.get_mut(id).data_mut()[i] = base;
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    Ok(worst)
}
