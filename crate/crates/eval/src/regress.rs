//! Small MLP regressors and softmax probes trained full-batch with AdamW.

use scar_core::nn::{Activation, Ctx, Mlp, MlpSpec};
use scar_core::optim::{AdamConfig, AdamW};
use scar_core::rng::stream;
use scar_core::{ParamStore, Tape, Tensor};

use crate::error::EvalError;

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    /// Hidden widths; empty gives a linear model.
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
}

impl FitConfig {
    /// Two hidden layers of width 32.
    pub fn mlp(seed: u64) -> Self {
        FitConfig {
            hidden: vec![32, 32],
            steps: 800,
            lr: 1e-2,
            wd: 0.0,
            seed,
        }
    }

    pub fn linear(seed: u64) -> Self {
        FitConfig {
            hidden: vec![],
            steps: 800,
            lr: 5e-2,
            wd: 0.0,
            seed,
        }
    }
}

fn moments(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for k in 0..d {
            mean[k] += row[k] / n;
        }
    }
    let mut sd = vec![0.0; d];
    for row in x.chunks(d) {
        for k in 0..d {
            sd[k] += (row[k] - mean[k]).powi(2) / n;
        }
    }
    (mean, sd.into_iter().map(|v| v.sqrt().max(1e-8)).collect())
}

fn standardize(x: &[f64], mean: &[f64], sd: &[f64]) -> Vec<f64> {
    let d = mean.len();
    x.iter().enumerate().map(|(i, v)| (v - mean[i % d]) / sd[i % d]).collect()
}

/// Regressor on standardized inputs and outputs.
pub struct Regressor {
    store: ParamStore,
    mlp: Mlp,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
    y_mean: Vec<f64>,
    y_sd: Vec<f64>,
}

fn build(d_in: usize, d_out: usize, cfg: &FitConfig) -> Result<(ParamStore, Mlp), EvalError> {
    let mut widths = vec![d_in];
    widths.extend(&cfg.hidden);
    widths.push(d_out);
    let mut store = ParamStore::new();
    let spec = MlpSpec {
        widths,
        activation: Activation::Tanh,
        init_scale: 1.0,
    };
    let mlp = Mlp::new(&mut store, "fit", &spec, &mut stream(cfg.seed, "fit/init"))?;
    Ok((store, mlp))
}

fn check_rows(x: &[f64], d_in: usize, rows: usize) -> Result<(), EvalError> {
    if d_in == 0 || x.len() != rows * d_in || rows == 0 {
        return Err(EvalError::NotEnoughData(format!("{} values for {rows} rows of width {d_in}", x.len())));
    }
    Ok(())
}

/// Least-squares fit of `y` (`d_out` wide) on `x` (`d_in` wide).
pub fn fit_regressor(x: &[f64], d_in: usize, y: &[f64], d_out: usize, cfg: &FitConfig) -> Result<Regressor, EvalError> {
    let n = y.len() / d_out.max(1);
    check_rows(x, d_in, n)?;
    let (x_mean, x_sd) = moments(x, d_in);
    let (y_mean, y_sd) = moments(y, d_out);
    let xs = Tensor::matrix(n, d_in, standardize(x, &x_mean, &x_sd))?;
    let ys = Tensor::matrix(n, d_out, standardize(y, &y_mean, &y_sd))?;
    let (mut store, mlp) = build(d_in, d_out, cfg)?;
    let mut opt = AdamW::new(vec![("fit.".into(), AdamConfig::new(cfg.lr, cfg.wd))]);
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let loss = mlp.forward(&cx, cx.constant(&xs)).mse(cx.constant(&ys));
        tape.backward(loss).write_params(&tape, &mut store);
        opt.step(&mut store);
    }
    Ok(Regressor {
        store,
        mlp,
        x_mean,
        x_sd,
        y_mean,
        y_sd,
    })
}

impl Regressor {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let d_in = self.x_mean.len();
        let n = x.len() / d_in;
        let xs = Tensor::matrix(n, d_in, standardize(x, &self.x_mean, &self.x_sd))?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store).with_frozen("");
        let out = self.mlp.forward(&cx, cx.constant(&xs)).value();
        let d = self.y_mean.len();
        Ok(out
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.y_sd[i % d] + self.y_mean[i % d])
            .collect())
    }
}

/// Variance-weighted `R² = 1 − Σ(y−ŷ)² / Σ(y−ȳ)²` pooled over output columns.
pub fn r_squared(y: &[f64], y_hat: &[f64], d: usize) -> f64 {
    let (mean, _) = moments(y, d);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (i, (a, b)) in y.iter().zip(y_hat).enumerate() {
        ss_res += (a - b) * (a - b);
        ss_tot += (a - mean[i % d]).powi(2);
    }
    if ss_tot <= 0.0 {
        return if ss_res <= 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Softmax classifier on standardized inputs.
pub struct Probe {
    store: ParamStore,
    mlp: Mlp,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
    pub classes: usize,
}

pub fn fit_probe(x: &[f64], d_in: usize, labels: &[usize], classes: usize, cfg: &FitConfig) -> Result<Probe, EvalError> {
    check_rows(x, d_in, labels.len())?;
    let (x_mean, x_sd) = moments(x, d_in);
    let xs = Tensor::matrix(labels.len(), d_in, standardize(x, &x_mean, &x_sd))?;
    let (mut store, mlp) = build(d_in, classes, cfg)?;
    let mut opt = AdamW::new(vec![("fit.".into(), AdamConfig::new(cfg.lr, cfg.wd))]);
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let loss = mlp.forward(&cx, cx.constant(&xs)).softmax_cross_entropy(labels)?;
        tape.backward(loss).write_params(&tape, &mut store);
        opt.step(&mut store);
    }
    Ok(Probe {
        store,
        mlp,
        x_mean,
        x_sd,
        classes,
    })
}

impl Probe {
    /// `(mean cross-entropy, accuracy)` on `(x, labels)`.
    pub fn score(&self, x: &[f64], labels: &[usize]) -> Result<(f64, f64), EvalError> {
        let d_in = self.x_mean.len();
        check_rows(x, d_in, labels.len())?;
        let xs = Tensor::matrix(labels.len(), d_in, standardize(x, &self.x_mean, &self.x_sd))?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store).with_frozen("");
        let logits = self.mlp.forward(&cx, cx.constant(&xs));
        let ce = logits.softmax_cross_entropy(labels)?.item();
        let lv = logits.value();
        let hits = lv
            .chunks(self.classes)
            .zip(labels)
            .filter(|(row, &l)| {
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i);
                best == Some(l)
            })
            .count();
        Ok((ce, hits as f64 / labels.len() as f64))
    }
}
