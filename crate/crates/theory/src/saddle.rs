//! Joint training of a linear encoder and a softmax embodiment classifier
//! through a gradient-reversal node.

use nalgebra::DMatrix;
use scar_core::nn::Ctx;
use scar_core::optim::{AdamConfig, AdamW};
use scar_core::{ParamId, ParamStore, Tape, Tensor, Var};
use serde::Serialize;

use crate::angles::principal_angles;
use crate::error::TheoryError;
use crate::experiment::VmfExperiment;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaddleConfig {
    pub steps: usize,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    /// Weight of the `−μ·log det(MMᵀ + εI)` rank penalty.
    pub mu: f64,
    pub eps: f64,
    /// Classifier-only steps after the joint phase (best response to the final encoder).
    pub best_response_steps: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SaddleConfig {
    pub fn new(seed: u64) -> Self {
        SaddleConfig {
            steps: 6000,
            lr_encoder: 1e-2,
            lr_classifier: 5e-2,
            mu: 1e-3,
            eps: 1e-6,
            best_response_steps: 500,
            n_train: 6000,
            n_test: 500,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SaddleReport {
    pub d_a: usize,
    pub d_z: usize,
    pub n_e: usize,
    pub kappa: f64,
    pub seed: u64,
    pub heldout_ce: f64,
    pub ln_e: f64,
    /// `max_{e,e'} ‖M(v_e − v_e')‖ / ‖M‖₂`.
    pub max_center_gap: f64,
    /// Largest principal angle between `row(M)` and `V⊥`, radians.
    pub max_angle: f64,
    /// `σ_min(M) / σ_max(M)`.
    pub sigma_ratio: f64,
    pub m: Vec<f64>,
}

impl SaddleReport {
    pub fn passes(&self) -> bool {
        (self.heldout_ce - self.ln_e).abs() <= 0.05 && self.max_center_gap < 0.05 && self.max_angle < 0.1
    }
}

struct Params {
    m: ParamId,
    w: ParamId,
    b: ParamId,
}

fn logits<'t>(cx: &Ctx<'t, '_>, p: &Params, x: Var<'t>) -> Var<'t> {
    x.matmul(cx.p(p.m).transpose()).grl(1.0).matmul(cx.p(p.w)).add_bias(cx.p(p.b))
}

pub fn center_gap(exp: &VmfExperiment, m: &[f64]) -> f64 {
    let mm = DMatrix::from_row_slice(exp.d_z, exp.d_a, m);
    let norm = mm.singular_values().max();
    let mut gap: f64 = 0.0;
    for a in &exp.centers {
        for b in &exp.centers {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let md = exp.encode(m, &d);
            gap = gap.max(md.iter().map(|v| v * v).sum::<f64>().sqrt() / norm);
        }
    }
    gap
}

/// Cross-entropy of the trained classifier on `(x, labels)`.
fn classifier_ce(
    store: &ParamStore,
    p: &Params,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64, TheoryError> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store).with_frozen("");
    Ok(logits(&cx, p, cx.constant(x)).softmax_cross_entropy(labels)?.item())
}

/// Runs the joint phase and the best-response phase, then scores the encoder.
pub fn saddle_train(exp: &VmfExperiment, cfg: &SaddleConfig) -> Result<SaddleReport, TheoryError> {
    let (xtr, ltr) = exp.sample(cfg.n_train, cfg.seed, "saddle/train")?;
    let (xte, lte) = exp.sample(cfg.n_test, cfg.seed, "saddle/test")?;
    let xtr = Tensor::matrix(ltr.len(), exp.d_a, xtr)?;
    let xte = Tensor::matrix(lte.len(), exp.d_a, xte)?;
    let mut store = ParamStore::new();
    let p = Params {
        m: store.add("sad.m", Tensor::matrix(exp.d_z, exp.d_a, exp.m.clone())?),
        w: store.add("sad.w", Tensor::zeros(&[exp.d_z, exp.n_e])),
        b: store.add("sad.b", Tensor::zeros(&[exp.n_e])),
    };
    let mut eye = vec![0.0; exp.d_z * exp.d_z];
    for i in 0..exp.d_z {
        eye[i * exp.d_z + i] = cfg.eps;
    }
    let eye = Tensor::matrix(exp.d_z, exp.d_z, eye)?;
    let mut opt = AdamW::new(vec![
        ("sad.m".into(), AdamConfig::new(cfg.lr_encoder, 0.0)),
        ("sad.".into(), AdamConfig::new(cfg.lr_classifier, 0.0)),
    ]);
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let ce = logits(&cx, &p, cx.constant(&xtr)).softmax_cross_entropy(&ltr)?;
        let m = cx.p(p.m);
        let pen = m.matmul(m.transpose()).add(cx.constant(&eye)).logdet_spd()?.scale(-cfg.mu);
        tape.backward(ce.add(pen)).write_params(&tape, &mut store);
        opt.step(&mut store);
    }
    for _ in 0..cfg.best_response_steps {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store).with_frozen("sad.m");
        let ce = logits(&cx, &p, cx.constant(&xtr)).softmax_cross_entropy(&ltr)?;
        tape.backward(ce).write_params(&tape, &mut store);
        opt.step(&mut store);
    }
    let m = store.get(p.m).data().to_vec();
    let sv = DMatrix::from_row_slice(exp.d_z, exp.d_a, &m).singular_values();
    let sigma_ratio = sv.min() / sv.max();
    if sigma_ratio < 1e-3 {
        return Err(TheoryError::RankCollapse(sigma_ratio));
    }
    let rows: Vec<Vec<f64>> = m.chunks(exp.d_a).map(<[f64]>::to_vec).collect();
    let max_angle = principal_angles(&rows, &exp.v_perp)?.into_iter().fold(0.0, f64::max);
    Ok(SaddleReport {
        d_a: exp.d_a,
        d_z: exp.d_z,
        n_e: exp.n_e,
        kappa: exp.kappa,
        seed: cfg.seed,
        heldout_ce: classifier_ce(&store, &p, &xte, &lte)?,
        ln_e: (exp.n_e as f64).ln(),
        max_center_gap: center_gap(exp, &m),
        max_angle,
        sigma_ratio,
        m,
    })
}
