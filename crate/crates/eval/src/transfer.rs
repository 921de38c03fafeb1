//! Rollout evaluation against ground-truth future frames.

use scar_core::rng::stream;
use scar_core::{ParamStore, Tensor};
use scar_models::{EpisodeBatch, ScarModel};
use scar_world::{DgpSpec, Frame, Trajectory};
use serde::Serialize;

use crate::classifier::token_frame;
use crate::error::EvalError;
use crate::metrics::{image_metrics, MetricRow};

/// Episodes per rollout batch.
const CHUNK: usize = 25;

/// One episode of one (method, task) cell; CSV rows follow episode order.
#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub method: String,
    pub task: String,
    pub episode: usize,
    #[serde(flatten)]
    pub metrics: MetricRow,
}

/// Predicted future frames per episode, from each episode's own context
/// under `codes_for(batch)`.
pub fn rollout_future_frames<F>(
    model: &ScarModel,
    store: &ParamStore,
    spec: &DgpSpec,
    episodes: &[&Trajectory],
    seed: u64,
    mut codes_for: F,
) -> Result<Vec<Vec<Frame>>, EvalError>
where
    F: FnMut(&EpisodeBatch, usize) -> Result<Tensor, EvalError>,
{
    let mc = &model.cfg;
    let mut out = Vec::with_capacity(episodes.len());
    for (ci, chunk) in episodes.chunks(CHUNK).enumerate() {
        let batch = EpisodeBatch::new(chunk, mc)?;
        let codes = codes_for(&batch, ci * CHUNK)?;
        let ctx = model.context(&batch);
        let mut noise = stream(seed, &format!("rollout/{ci}"));
        let v = model.rollout(store, &ctx, &codes, batch.b, &mut noise)?;
        let d = mc.d_v;
        for ep in 0..batch.b {
            out.push(
                (mc.f_hist..batch.f)
                    .map(|k| token_frame(spec, &v[(ep * batch.f + k) * d..(ep * batch.f + k + 1) * d]))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Ground-truth frames of the predicted segment.
pub fn true_future_frames(model: &ScarModel, spec: &DgpSpec, ep: &Trajectory) -> Vec<Frame> {
    let mc = &model.cfg;
    (mc.f_hist..mc.tokens())
        .map(|k| token_frame(spec, ep.x_row(k * mc.stride)))
        .collect()
}

/// Metrics per episode when the FDM is conditioned on the model's own codes
/// for the same episode (IDM means, or raw commands for the baseline).
pub fn evaluate_episodes(
    model: &ScarModel,
    store: &ParamStore,
    spec: &DgpSpec,
    episodes: &[&Trajectory],
    seed: u64,
) -> Result<Vec<MetricRow>, EvalError> {
    let pred = rollout_future_frames(model, store, spec, episodes, seed, |b, _| Ok(model.codes(store, b)?))?;
    score(model, spec, episodes, &pred)
}

pub fn score(
    model: &ScarModel,
    spec: &DgpSpec,
    episodes: &[&Trajectory],
    pred: &[Vec<Frame>],
) -> Result<Vec<MetricRow>, EvalError> {
    episodes
        .iter()
        .zip(pred)
        .map(|(ep, p)| image_metrics(p, &true_future_frames(model, spec, ep)))
        .collect()
}

pub fn metric_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("method,task,SSIM,PSNR,MSE,SSIM-L\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.4},{:.6e},{:.6}\n",
            r.method, r.task, r.metrics.ssim, r.metrics.psnr, r.metrics.mse, r.metrics.ssim_l
        ));
    }
    s
}
