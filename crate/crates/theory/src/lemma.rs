//! Inverse-dynamics identifiability on a fully linear world: a jointly
//! trained linear IDM/FDM pair should code the raw action through a
//! state-independent bijection.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use scar_core::nn::Ctx;
use scar_core::optim::{AdamConfig, AdamW};
use scar_core::rng::{child_seed, stream};
use scar_core::{concat_cols, ParamId, ParamStore, Tape, Tensor, Var};
use scar_eval::r_squared;
use scar_world::{generate_episode, DgpConfig, DgpSpec};
use serde::Serialize;

use crate::error::TheoryError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the KL term of a unit-variance Gaussian posterior, `β·½‖ã‖²`.
    pub beta: f64,
    pub episodes_per_embodiment: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl LemmaConfig {
    pub fn new(seed: u64) -> Self {
        LemmaConfig {
            steps: 8000,
            lr: 1e-2,
            beta: 0.1,
            episodes_per_embodiment: 40,
            checkpoint_every: 250,
            seed,
        }
    }
}

/// Fit and held-out transitions of the linear world.
#[derive(Clone, Debug)]
pub struct Transitions {
    pub d_x: usize,
    pub d_a: usize,
    pub d_s: usize,
    /// `[x_t, x_{t+1}]` rows.
    pub pairs: Vec<f64>,
    pub next: Vec<f64>,
    pub a: Vec<f64>,
    pub s: Vec<f64>,
    pub fit_rows: usize,
}

impl Transitions {
    pub fn rows(&self) -> usize {
        self.next.len() / self.d_x
    }
}

/// The linear DGP: `d_u = 2`, `d_a = 3`, `d_s = d_x = 3`.
pub fn linear_spec() -> Result<DgpSpec, TheoryError> {
    Ok(DgpSpec::build(DgpConfig::linear(2, 3, 3))?)
}

/// Episodes of every embodiment; the last 30% of each embodiment's episodes are held out.
pub fn linear_transitions(spec: &DgpSpec, episodes: usize, seed: u64) -> Result<Transitions, TheoryError> {
    let c = &spec.cfg;
    let mut parts = [(Vec::new(), Vec::new(), Vec::new(), Vec::new()), (Vec::new(), Vec::new(), Vec::new(), Vec::new())];
    for e in 0..spec.n_embodiments() {
        for k in 0..episodes {
            let tr = generate_episode(child_seed(seed, &format!("lemma/{e}/{k}")), e, c.t, spec)?;
            let part = &mut parts[usize::from(k >= episodes * 7 / 10)];
            for i in 0..tr.t - 1 {
                part.0.extend_from_slice(tr.x_row(i));
                part.0.extend_from_slice(tr.x_row(i + 1));
                part.1.extend_from_slice(tr.x_row(i + 1));
                part.2.extend_from_slice(tr.a_row(i));
                part.3.extend_from_slice(tr.s_row(i));
            }
        }
    }
    let [fit, held] = parts;
    let fit_rows = fit.1.len() / c.d_x;
    let join = |a: Vec<f64>, b: Vec<f64>| a.into_iter().chain(b).collect::<Vec<f64>>();
    Ok(Transitions {
        d_x: c.d_x,
        d_a: c.d_a,
        d_s: c.d_s,
        pairs: join(fit.0, held.0),
        next: join(fit.1, held.1),
        a: join(fit.2, held.2),
        s: join(fit.3, held.3),
        fit_rows,
    })
}

/// Least squares with intercept.
pub struct Ols {
    coef: DMatrix<f64>,
    d_in: usize,
}

impl Ols {
    pub fn fit(x: &[f64], d_in: usize, y: &[f64], d_out: usize) -> Ols {
        let n = y.len() / d_out;
        let xm = DMatrix::from_fn(n, d_in + 1, |i, j| if j == d_in { 1.0 } else { x[i * d_in + j] });
        let ym = DMatrix::from_row_slice(n, d_out, y);
        let coef = xm.svd(true, true).solve(&ym, 1e-12).expect("svd with both factors");
        Ols { coef, d_in }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.d_in;
        let xm = DMatrix::from_fn(n, self.d_in + 1, |i, j| if j == self.d_in { 1.0 } else { x[i * self.d_in + j] });
        let y = xm * &self.coef;
        (0..y.nrows()).flat_map(|i| y.row(i).iter().copied().collect::<Vec<_>>()).collect()
    }
}

fn split(v: &[f64], d: usize, fit_rows: usize) -> (&[f64], &[f64]) {
    v.split_at(fit_rows * d)
}

/// Held-out R² of an OLS fit of `y` on `x`.
pub fn heldout_r2(x: &[f64], dx: usize, y: &[f64], dy: usize, fit_rows: usize) -> f64 {
    let (xf, xh) = split(x, dx, fit_rows);
    let (yf, yh) = split(y, dy, fit_rows);
    r_squared(yh, &Ols::fit(xf, dx, yf, dy).predict(xh), dy)
}

fn hcat(a: &[f64], da: usize, b: &[f64], db: usize) -> Vec<f64> {
    a.chunks(da).zip(b.chunks(db)).flat_map(|(x, y)| x.iter().chain(y).copied()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodeScores {
    /// Held-out R² of `a → ã`.
    pub r2_forward: f64,
    /// Held-out R² of `ã → a`.
    pub r2_inverse: f64,
    /// R²(ã | a, s_t) − R²(ã | a), held out.
    pub state_gap: f64,
}

pub fn score_codes(tr: &Transitions, codes: &[f64]) -> CodeScores {
    let (da, ds, n) = (tr.d_a, tr.d_s, tr.fit_rows);
    let r2_forward = heldout_r2(&tr.a, da, codes, da, n);
    let with_s = hcat(&tr.a, da, &tr.s, ds);
    CodeScores {
        r2_forward,
        r2_inverse: heldout_r2(codes, da, &tr.a, da, n),
        state_gap: heldout_r2(&with_s, da + ds, codes, da, n) - r2_forward,
    }
}

struct Net {
    idm_w: ParamId,
    idm_b: ParamId,
    fdm_w: ParamId,
    fdm_b: ParamId,
}

impl Net {
    fn new(store: &mut ParamStore, d_x: usize, d_a: usize, seed: u64) -> Result<Net, TheoryError> {
        use rand::Rng;
        let mut rng = stream(seed, "lemma/init");
        let mut init = |rows: usize, cols: usize| -> Result<Tensor, TheoryError> {
            let bound = (3.0 / rows as f64).sqrt();
            Ok(Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())?)
        };
        Ok(Net {
            idm_w: store.add("idm.w", init(2 * d_x, d_a)?),
            idm_b: store.add("idm.b", Tensor::zeros(&[d_a])),
            fdm_w: store.add("fdm.w", init(d_x + d_a, d_x)?),
            fdm_b: store.add("fdm.b", Tensor::zeros(&[d_x])),
        })
    }

    fn codes<'t>(&self, cx: &Ctx<'t, '_>, pairs: Var<'t>) -> Var<'t> {
        pairs.matmul(cx.p(self.idm_w)).add_bias(cx.p(self.idm_b))
    }

    fn predict<'t>(&self, cx: &Ctx<'t, '_>, x_t: Var<'t>, codes: Var<'t>) -> Var<'t> {
        concat_cols(&[x_t, codes]).matmul(cx.p(self.fdm_w)).add_bias(cx.p(self.fdm_b))
    }

    fn eval(&self, store: &ParamStore, tr: &Transitions) -> Result<(f64, Vec<f64>), TheoryError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store).with_frozen("");
        let pairs = cx.constant(&Tensor::matrix(tr.rows(), 2 * tr.d_x, tr.pairs.clone())?);
        let codes = self.codes(&cx, pairs);
        let pred = self.predict(&cx, pairs.slice_cols(0, tr.d_x), codes);
        let (_, held_next) = split(&tr.next, tr.d_x, tr.fit_rows);
        let held_pred = pred.slice_rows(tr.fit_rows, tr.rows()).value();
        let rec = held_next.iter().zip(&held_pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / held_next.len() as f64;
        Ok((rec, codes.value()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Checkpoint {
    pub step: usize,
    pub rec_loss: f64,
    pub state_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaReport {
    pub rec_loss: f64,
    pub trained: CodeScores,
    pub untrained: CodeScores,
    /// Held-out R² of `a → ã` after shuffling the pairing of `a` and `ã`.
    pub shuffled_r2: f64,
    pub checkpoints: Vec<Checkpoint>,
    /// Spearman correlation of reconstruction loss and state gap over checkpoints.
    pub spearman: f64,
}

impl LemmaReport {
    pub fn passes(&self) -> bool {
        self.trained.r2_forward > 0.99 && self.trained.r2_inverse > 0.99 && self.trained.state_gap < 0.01 && self.shuffled_r2 < 0.1
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].partial_cmp(&v[*b]).expect("finite"));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Trains the pair to (near) zero reconstruction loss and scores the codes.
pub fn idm_lemma_check(spec: &DgpSpec, cfg: &LemmaConfig) -> Result<LemmaReport, TheoryError> {
    let tr = linear_transitions(spec, cfg.episodes_per_embodiment, cfg.seed)?;
    let (dx, da) = (tr.d_x, tr.d_a);
    let mut store = ParamStore::new();
    let net = Net::new(&mut store, dx, da, cfg.seed)?;
    let (_, init_codes) = net.eval(&store, &tr)?;
    let untrained = score_codes(&tr, &init_codes);
    let (fit_pairs, _) = split(&tr.pairs, 2 * dx, tr.fit_rows);
    let (fit_next, _) = split(&tr.next, dx, tr.fit_rows);
    let pairs = Tensor::matrix(tr.fit_rows, 2 * dx, fit_pairs.to_vec())?;
    let next = Tensor::matrix(tr.fit_rows, dx, fit_next.to_vec())?;
    let mut opt = AdamW::new(vec![("".into(), AdamConfig::new(cfg.lr, 0.0))]);
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.steps {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let p = cx.constant(&pairs);
        let codes = net.codes(&cx, p);
        let rec = net.predict(&cx, p.slice_cols(0, dx), codes).mse(cx.constant(&next));
        let kl = codes.square().sum().scale(0.5 / tr.fit_rows as f64);
        tape.backward(rec.add(kl.scale(cfg.beta))).write_params(&tape, &mut store);
        opt.step(&mut store);
        if step % cfg.checkpoint_every == 0 {
            let (rec_loss, codes) = net.eval(&store, &tr)?;
            checkpoints.push(Checkpoint {
                step,
                rec_loss,
                state_gap: score_codes(&tr, &codes).state_gap,
            });
        }
    }
    let (rec_loss, codes) = net.eval(&store, &tr)?;
    if rec_loss >= 1e-3 {
        return Err(TheoryError::PremiseUnmet(rec_loss));
    }
    let trained = score_codes(&tr, &codes);
    let mut perm: Vec<usize> = (0..tr.rows()).collect();
    perm.shuffle(&mut stream(cfg.seed, "lemma/shuffle"));
    let shuffled_a: Vec<f64> = perm.iter().flat_map(|&i| tr.a[i * da..(i + 1) * da].iter().copied()).collect();
    let shuffled_r2 = heldout_r2(&shuffled_a, da, &codes, da, tr.fit_rows);
    let losses: Vec<f64> = checkpoints.iter().map(|c| c.rec_loss).collect();
    let gaps: Vec<f64> = checkpoints.iter().map(|c| c.state_gap).collect();
    Ok(LemmaReport {
        rec_loss,
        trained,
        untrained,
        shuffled_r2,
        spearman: spearman(&losses, &gaps),
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_of_monotone_pairs() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.5, 0.7, 9.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_recovers_affine_map() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = x.chunks(2).map(|r| 2.0 * r[0] - r[1] + 0.5).collect();
        let p = Ols::fit(&x, 2, &y, 1).predict(&x);
        for (a, b) in y.iter().zip(&p) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
