//! Scores for the action-to-latent controller: latent error against the IDM
//! posterior means and rollouts conditioned on predicted latents.

use scar_core::{ParamStore, Tensor};
use scar_models::train::a2l_context;
use scar_models::{A2l, EpisodeBatch, ScarModel};
use scar_world::{DgpSpec, Trajectory};

use crate::error::EvalError;
use crate::metrics::MetricRow;
use crate::transfer::{rollout_future_frames, score};

/// Controller latents for every transition of the batch.
pub fn a2l_codes(model: &ScarModel, a2l: &A2l, store: &ParamStore, batch: &EpisodeBatch) -> Result<Tensor, EvalError> {
    let ctx = a2l_context(model, batch)?;
    let z = a2l.predict(store, &batch.actions, &ctx, batch.b)?;
    Ok(Tensor::matrix(batch.b * (batch.t - 1), model.cfg.d_z, z)?)
}

/// Mean squared error between controller latents and IDM posterior means.
pub fn a2l_latent_mse(model: &ScarModel, a2l: &A2l, store: &ParamStore, episodes: &[&Trajectory]) -> Result<f64, EvalError> {
    let (mut se, mut n) = (0.0, 0usize);
    for chunk in episodes.chunks(25) {
        let batch = EpisodeBatch::new(chunk, &model.cfg)?;
        let z_hat = a2l_codes(model, a2l, store, &batch)?;
        let z = model.codes(store, &batch)?;
        se += z_hat.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += z.numel();
    }
    Ok(se / n.max(1) as f64)
}

/// Per-episode metrics of rollouts driven by controller latents.
pub fn a2l_rollout_metrics(
    model: &ScarModel,
    a2l: &A2l,
    store: &ParamStore,
    spec: &DgpSpec,
    episodes: &[&Trajectory],
    seed: u64,
) -> Result<Vec<MetricRow>, EvalError> {
    let pred = rollout_future_frames(model, store, spec, episodes, seed, |b, _| a2l_codes(model, a2l, store, b))?;
    score(model, spec, episodes, &pred)
}
