//! Decoding raw commands from frozen latent actions.

use scar_core::ParamStore;
use scar_models::{EpisodeBatch, ScarModel};
use scar_world::Trajectory;
use serde::Serialize;

use crate::error::EvalError;
use crate::recovery::LatentSample;
use crate::regress::{fit_regressor, FitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub train_mse: f64,
    pub train_l1: f64,
    pub eval_mse: f64,
    pub eval_l1: f64,
}

fn errors(y: &[f64], y_hat: &[f64]) -> (f64, f64) {
    let n = y.len().max(1) as f64;
    let mse = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let l1 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    (mse, l1)
}

/// Fits `codes → actions` on the training rows and scores both splits.
pub fn probe_codes(
    train_codes: &[f64],
    train_actions: &[f64],
    eval_codes: &[f64],
    eval_actions: &[f64],
    d_code: usize,
    d_a: usize,
    cfg: &FitConfig,
) -> Result<ProbeReport, EvalError> {
    let reg = fit_regressor(train_codes, d_code, train_actions, d_a, cfg)?;
    let (train_mse, train_l1) = errors(train_actions, &reg.predict(train_codes)?);
    let (eval_mse, eval_l1) = errors(eval_actions, &reg.predict(eval_codes)?);
    Ok(ProbeReport {
        train_mse,
        train_l1,
        eval_mse,
        eval_l1,
    })
}

/// Per-transition codes and raw commands of a set of episodes.
pub fn codes_and_actions(
    model: &ScarModel,
    store: &ParamStore,
    episodes: &[&Trajectory],
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let batch = EpisodeBatch::new(episodes, &model.cfg)?;
    let codes = model.codes(store, &batch)?;
    Ok((codes.into_data(), batch.actions.into_data()))
}

/// Codes of `episodes` paired with their ground-truth unified actions.
pub fn latent_sample(
    model: &ScarModel,
    store: &ParamStore,
    episodes: &[&Trajectory],
    classes: usize,
) -> Result<LatentSample, EvalError> {
    let mut z = Vec::new();
    for chunk in episodes.chunks(50) {
        let batch = EpisodeBatch::new(chunk, &model.cfg)?;
        z.extend(model.codes(store, &batch)?.into_data());
    }
    let d_u = episodes.first().map_or(0, |t| t.u.len() / (t.t - 1));
    Ok(LatentSample {
        d_z: z.len() / episodes.iter().map(|t| t.t - 1).sum::<usize>().max(1),
        z,
        u: episodes.iter().flat_map(|t| t.u.iter().copied()).collect(),
        d_u,
        labels: episodes.iter().flat_map(|t| std::iter::repeat_n(t.embodiment, t.t - 1)).collect(),
        classes,
    })
}

/// Action probe on a frozen model: trained on `train` episodes, evaluated on `eval`.
pub fn action_probe(
    model: &ScarModel,
    store: &ParamStore,
    train: &[&Trajectory],
    eval: &[&Trajectory],
    cfg: &FitConfig,
) -> Result<ProbeReport, EvalError> {
    let (zt, at) = codes_and_actions(model, store, train)?;
    let (ze, ae) = codes_and_actions(model, store, eval)?;
    let d_code = zt.len() / (at.len() / model.cfg.d_a).max(1);
    probe_codes(&zt, &at, &ze, &ae, d_code, model.cfg.d_a, cfg)
}
