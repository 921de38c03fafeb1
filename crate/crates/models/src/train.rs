//! Loss assembly and training loops.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use scar_core::nn::Ctx;
use scar_core::optim::{grad_norm, AdamConfig, AdamW};
use scar_core::rng::{stream, Stream};
use scar_core::{ParamStore, Tape, Tensor, Var};
use scar_world::{Dataset, Split, Trajectory};

use crate::a2l::A2l;
use crate::batch::EpisodeBatch;
use crate::config::{TrainConfig, Variant};
use crate::error::ModelError;
use crate::fdm::Cond;
use crate::flow::{diffusion_forcing_schedule, make_flow_target};
use crate::model::{CondSource, ScarModel};

pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub rec: Var<'t>,
    pub kl: Option<Var<'t>>,
    pub grl: Option<Var<'t>>,
}

fn normals(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Flow-matching reconstruction loss of the FDM under `cond`, with
/// diffusion-forcing noise levels drawn from `rng`.
fn flow_loss<'t>(
    cx: &Ctx<'t, '_>,
    model: &ScarModel,
    batch: &EpisodeBatch,
    cond: Cond<'t>,
    rng: &mut Stream,
) -> Result<Var<'t>, ModelError> {
    let m = &model.cfg;
    let tau = diffusion_forcing_schedule(batch.b, batch.f, m.f_hist, m.p_clean, rng);
    let eps = normals(rng, batch.tokens.numel());
    let fb = make_flow_target(batch.tokens.data(), &eps, &tau, m.d_v, m.schedule)?;
    let rows = batch.b * batch.f;
    let v_tilde = cx.constant(&Tensor::matrix(rows, m.d_v, fb.v_tilde)?);
    let target = cx.constant(&Tensor::matrix(rows, m.d_v, fb.u_tau)?);
    let pred = model.fdm.predict(cx, v_tilde, &tau, cond, batch.b)?;
    Ok(pred.mse(target))
}

/// `L_rec + β L_KL + λ_adv L_GRL`. Inactive terms are not built.
///
/// `L_KL` sums the per-dimension divergence and averages over transitions;
/// `L_GRL` is the mean discriminator cross-entropy over every latent token.
pub fn total_loss<'t>(
    cx: &Ctx<'t, '_>,
    model: &ScarModel,
    batch: &EpisodeBatch,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<LossParts<'t>, ModelError> {
    let (codes, kl, grl) = match model.source {
        CondSource::RawAction => (cx.constant(&batch.actions), None, None),
        CondSource::Latent => {
            let post = model.idm.forward(cx, cx.constant(&batch.frames), batch.b, batch.t)?;
            let sigma = post.log_sigma.exp();
            let eps = normals(rng, batch.b * (batch.t - 1) * model.cfg.d_z);
            let z = post.mu.reparam_sample(sigma, &eps)?;
            let kl = if cfg.beta > 0.0 {
                let n = (batch.b * (batch.t - 1)) as f64;
                Some(post.mu.kl_diag_gaussian(sigma)?.scale(1.0 / n))
            } else {
                None
            };
            let grl = if cfg.lambda_adv > 0.0 {
                Some(model.disc.loss(cx, z, &batch.transition_labels(), cfg.alpha)?)
            } else {
                None
            };
            (z, kl, grl)
        }
    };
    let c = model.cond.forward(cx, codes, batch.b, batch.t)?;
    let rec = flow_loss(cx, model, batch, Cond::Tokens(c), rng)?;
    let mut total = rec;
    if let Some(k) = kl {
        total = total.add(k.scale(cfg.beta));
    }
    if let Some(g) = grl {
        total = total.add(g.scale(cfg.lambda_adv));
    }
    Ok(LossParts { total, rec, kl, grl })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub kl: Option<f64>,
    pub grl: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,L_total,L_rec,L_KL,L_GRL,grad_norm,wall_ms";

    /// Inactive components are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{},{},{:e},{:.3}",
                r.step,
                r.total,
                r.rec,
                opt(r.kl),
                opt(r.grl),
                r.grad_norm,
                r.wall_ms
            );
        }
        s
    }

    /// Mean `L_rec` over logged steps in `lo..=hi`.
    pub fn mean_rec(&self, lo: usize, hi: usize) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.step >= lo && r.step <= hi)
            .map(|r| r.rec)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: TrainLog,
}

/// Training episodes for `variant`: every training episode, or only the
/// target embodiment's for the target-only baseline.
pub fn training_pool(ds: &Dataset, variant: Variant) -> Vec<&Trajectory> {
    ds.split(Split::Train)
        .filter(|r| !variant.target_only() || r.traj.embodiment == ds.target)
        .map(|r| &r.traj)
        .collect()
}

fn optimizer(cfg: &TrainConfig) -> AdamW {
    let fdm = AdamConfig::new(cfg.lr_fdm, cfg.wd_fdm);
    AdamW::new(vec![
        ("idm.".into(), AdamConfig::new(cfg.lr_idm, cfg.wd_idm)),
        ("fdm.".into(), fdm),
        ("cond.".into(), fdm),
        ("disc.".into(), AdamConfig::new(cfg.lr_disc, cfg.wd_disc)),
        ("a2l.".into(), AdamConfig::new(cfg.lr_a2l, cfg.wd_a2l)),
    ])
}

fn sample_batch<'a>(pool: &[&'a Trajectory], n: usize, rng: &mut Stream) -> Vec<&'a Trajectory> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn check(step: usize, parts: &[(&'static str, Option<f64>)], total: f64) -> Result<(), ModelError> {
    if !total.is_finite() {
        let component = parts
            .iter()
            .find(|(_, v)| v.is_some_and(|x| !x.is_finite()))
            .map(|(n, _)| *n)
            .unwrap_or("total");
        return Err(ModelError::NonFinite { step, component });
    }
    if total > 1e6 {
        return Err(ModelError::Diverged { step, loss: total });
    }
    Ok(())
}

/// Joint training of IDM, FDM and discriminator with one optimizer step over
/// all parameters per batch; the GRL node realizes the min-max.
pub fn train_scar(
    model: &ScarModel,
    mut store: ParamStore,
    cfg: &TrainConfig,
    pool: &[&Trajectory],
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(ModelError::EmptyPool(cfg.variant.name().into()));
    }
    let mut opt = optimizer(cfg);
    let mut batches = stream(cfg.seed, "train/batch");
    let mut noise = stream(cfg.seed, "train/noise");
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let batch = EpisodeBatch::new(&sample_batch(pool, cfg.batch, &mut batches), &model.cfg)?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let parts = total_loss(&cx, model, &batch, cfg, &mut noise)?;
        let (total, rec) = (parts.total.item(), parts.rec.item());
        let kl = parts.kl.map(|v| v.item());
        let grl = parts.grl.map(|v| v.item());
        check(step, &[("L_rec", Some(rec)), ("L_KL", kl), ("L_GRL", grl)], total)?;
        let grads = tape.backward(parts.total);
        grads.write_params(&tape, &mut store);
        let gn = grad_norm(&store);
        opt.step(&mut store);
        log.rows.push(LogRow {
            step,
            total,
            rec,
            kl,
            grl,
            grad_norm: gn,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome { store, log })
}

/// Action-free FDM training: the same flow objective with every AdaLN
/// replaced by plain layer norm. Only `fdm.` parameters move.
pub fn pretrain_fdm(
    model: &ScarModel,
    mut store: ParamStore,
    cfg: &TrainConfig,
    pool: &[&Trajectory],
    steps: usize,
) -> Result<TrainOutcome, ModelError> {
    if pool.is_empty() {
        return Err(ModelError::EmptyPool("pretrain".into()));
    }
    let mut opt = optimizer(cfg);
    let mut batches = stream(cfg.seed, "pretrain/batch");
    let mut noise = stream(cfg.seed, "pretrain/noise");
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 1..=steps {
        let batch = EpisodeBatch::new(&sample_batch(pool, cfg.batch, &mut batches), &model.cfg)?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let rec = flow_loss(&cx, model, &batch, Cond::None, &mut noise)?;
        let r = rec.item();
        check(step, &[("L_rec", Some(r))], r)?;
        tape.backward(rec).write_params(&tape, &mut store);
        let gn = grad_norm(&store);
        opt.step(&mut store);
        log.rows.push(LogRow {
            step,
            total: r,
            rec: r,
            kl: None,
            grl: None,
            grad_norm: gn,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome { store, log })
}

/// Held-out flow loss with conditioning from posterior means (or raw
/// commands) and noise fixed by `seed`.
pub fn eval_rec_loss(
    model: &ScarModel,
    store: &ParamStore,
    episodes: &[&Trajectory],
    seed: u64,
) -> Result<f64, ModelError> {
    let mut noise = stream(seed, "eval/rec");
    let mut acc = 0.0;
    let mut n = 0usize;
    for chunk in episodes.chunks(16) {
        let batch = EpisodeBatch::new(chunk, &model.cfg)?;
        let codes = model.codes(store, &batch)?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store).with_frozen("");
        let c = model.cond.forward(&cx, cx.constant(&codes), batch.b, batch.t)?;
        let rec = flow_loss(&cx, model, &batch, Cond::Tokens(c), &mut noise)?.item();
        acc += rec * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(acc / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct A2lTrainConfig {
    /// Also fine-tune the FDM (and its conditioning encoder) through the flow loss.
    pub finetune: bool,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub lr_fdm: f64,
    pub wd_fdm: f64,
    pub seed: u64,
}

impl A2lTrainConfig {
    pub fn new(seed: u64) -> Self {
        A2lTrainConfig {
            finetune: false,
            steps: 1500,
            batch: 16,
            lr: 1e-3,
            wd: 1e-4,
            lr_fdm: 1e-4,
            wd_fdm: 5e-2,
            seed,
        }
    }
}

/// A2L context rows as a tensor.
pub fn a2l_context(model: &ScarModel, batch: &EpisodeBatch) -> Result<Tensor, ModelError> {
    Ok(Tensor::matrix(
        batch.b * model.cfg.f_hist,
        model.cfg.d_v,
        model.context(batch),
    )?)
}

/// Fits the controller to stop-gradient IDM posterior means. The IDM never
/// enters the tape as a parameter; without `finetune` neither does the FDM.
pub fn train_a2l(
    model: &ScarModel,
    a2l: &A2l,
    mut store: ParamStore,
    cfg: &A2lTrainConfig,
    pool: &[&Trajectory],
) -> Result<TrainOutcome, ModelError> {
    if pool.is_empty() {
        return Err(ModelError::EmptyPool("a2l".into()));
    }
    let mut opt = AdamW::new(vec![
        ("a2l.".into(), AdamConfig::new(cfg.lr, cfg.wd)),
        ("fdm.".into(), AdamConfig::new(cfg.lr_fdm, cfg.wd_fdm)),
        ("cond.".into(), AdamConfig::new(cfg.lr_fdm, cfg.wd_fdm)),
    ]);
    let mut batches = stream(cfg.seed, "a2l/batch");
    let mut noise = stream(cfg.seed, "a2l/noise");
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let batch = EpisodeBatch::new(&sample_batch(pool, cfg.batch, &mut batches), &model.cfg)?;
        let target = model.codes(&store, &batch)?;
        let context = a2l_context(model, &batch)?;
        let tape = Tape::new();
        let mut cx = Ctx::new(&tape, &store).with_frozen("idm.").with_frozen("disc.");
        if !cfg.finetune {
            cx = cx.with_frozen("fdm.").with_frozen("cond.");
        }
        let z_hat = a2l.forward(&cx, cx.constant(&batch.actions), cx.constant(&context), batch.b)?;
        let l_a2l = z_hat.mse(cx.constant(&target));
        let (total, rec) = if cfg.finetune {
            let c = model.cond.forward(&cx, z_hat, batch.b, batch.t)?;
            let rec = flow_loss(&cx, model, &batch, Cond::Tokens(c), &mut noise)?;
            (l_a2l.add(rec), Some(rec.item()))
        } else {
            (l_a2l, None)
        };
        let t = total.item();
        check(step, &[("L_A2L", Some(l_a2l.item())), ("L_rec", rec)], t)?;
        tape.backward(total).write_params(&tape, &mut store);
        let gn = grad_norm(&store);
        opt.step(&mut store);
        log.rows.push(LogRow {
            step,
            total: t,
            rec: rec.unwrap_or(f64::NAN),
            kl: None,
            grl: None,
            grad_norm: gn,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome { store, log })
}
