//! Action-conditioned forward dynamics model predicting flow-matching velocities.

use scar_core::nn::{time_embed_rows, AdaLn, CausalConv, Ctx, Linear};
use scar_core::rng::Stream;
use scar_core::{concat_cols, ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::ModelError;

#[derive(Clone, Debug)]
struct Block {
    ada: AdaLn,
    l1: Linear,
    l2: Linear,
}

/// Residual MLP over tokens. Each token sees its own noisy latent, the
/// previous token's noisy latent and both noise levels; conditioning enters
/// through AdaLN in every block.
#[derive(Clone, Debug)]
pub struct Fdm {
    inp: Linear,
    blocks: Vec<Block>,
    out: Linear,
    pub d_v: usize,
    pub cond_width: usize,
    pub time_width: usize,
}

/// Conditioning for [`Fdm::predict`].
#[derive(Clone, Copy)]
pub enum Cond<'t> {
    /// Per-token conditioning `[b·f, cond_width]`.
    Tokens(Var<'t>),
    /// Action-free: plain layer norm replaces every AdaLN.
    None,
}

impl Fdm {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let h = cfg.fdm_hidden;
        let inp = Linear::new(store, "fdm.in", 2 * cfg.d_v + 2 * cfg.time_width, h, 1.0, rng);
        let blocks = (0..cfg.fdm_blocks)
            .map(|i| Block {
                // zero modulation weights: conditioning starts as the identity
                ada: AdaLn::new(store, &format!("fdm.b{i}.ada"), h, cfg.cond_width, 0.0, rng),
                l1: Linear::new(store, &format!("fdm.b{i}.l1"), h, h, 1.0, rng),
                l2: Linear::new_zero_bias(store, &format!("fdm.b{i}.l2"), h, h, 0.5, rng),
            })
            .collect();
        let out = Linear::new_zero_bias(store, "fdm.out", h, cfg.d_v, 1.0, rng);
        Fdm {
            inp,
            blocks,
            out,
            d_v: cfg.d_v,
            cond_width: cfg.cond_width,
            time_width: cfg.time_width,
        }
    }

    /// `v_tilde`: `[b·f, d_v]`, `tau`: one level per row.
    pub fn predict<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        v_tilde: Var<'t>,
        tau: &[f64],
        cond: Cond<'t>,
        b: usize,
    ) -> Result<Var<'t>, ModelError> {
        let rows = v_tilde.rows();
        if tau.len() != rows || b == 0 || rows % b != 0 {
            return Err(ModelError::Misaligned {
                expected: rows,
                got: tau.len(),
            });
        }
        let f = rows / b;
        if let Cond::Tokens(c) = cond {
            if c.rows() != rows || c.cols() != self.cond_width {
                return Err(ModelError::Misaligned {
                    expected: rows,
                    got: c.rows(),
                });
            }
        }
        let mut prev_idx = Vec::with_capacity(rows);
        let mut prev_tau = Vec::with_capacity(rows);
        for ep in 0..b {
            for k in 0..f {
                if k == 0 {
                    prev_idx.push(None);
                    // no predecessor: treat it as pure noise
                    prev_tau.push(1.0);
                } else {
                    prev_idx.push(Some(ep * f + k - 1));
                    prev_tau.push(tau[ep * f + k - 1]);
                }
            }
        }
        let x = concat_cols(&[
            v_tilde,
            v_tilde.gather_rows(&prev_idx),
            cx.constant(&time_embed_rows(tau, self.time_width)),
            cx.constant(&time_embed_rows(&prev_tau, self.time_width)),
        ]);
        let mut h = self.inp.forward(cx, x);
        for blk in &self.blocks {
            let n = match cond {
                Cond::Tokens(c) => blk.ada.forward(cx, h, c)?,
                Cond::None => h.layer_norm(),
            };
            h = h.add(blk.l2.forward(cx, blk.l1.forward(cx, n).gelu()));
        }
        Ok(self.out.forward(cx, h.layer_norm()))
    }
}

/// Causal temporal convolution from frame-rate action codes to FDM tokens.
///
/// A zero code is placed before the `t−1` transition codes of each episode, so
/// token 0 is unconditioned and token `f` sees the transitions that end in its
/// stride block.
#[derive(Clone, Debug)]
pub struct CondEncoder {
    pub conv: CausalConv,
}

impl CondEncoder {
    pub fn new(store: &mut ParamStore, d_in: usize, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        CondEncoder {
            conv: CausalConv::new(store, "cond", d_in, cfg.cond_width, cfg.stride, 1.0, rng),
        }
    }

    /// `codes`: `[b·(t−1), d_in]` → `[b·f, cond_width]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, codes: Var<'t>, b: usize, t: usize) -> Result<Var<'t>, ModelError> {
        if codes.rows() != b * (t - 1) {
            return Err(ModelError::Misaligned {
                expected: b * (t - 1),
                got: codes.rows(),
            });
        }
        let mut idx = Vec::with_capacity(b * t);
        for ep in 0..b {
            idx.push(None);
            idx.extend((0..t - 1).map(|i| Some(ep * (t - 1) + i)));
        }
        Ok(self.conv.forward(cx, codes.gather_rows(&idx), b, t)?)
    }

    /// Conditioning without recording gradients.
    pub fn tokens(&self, store: &ParamStore, codes: &Tensor, b: usize, t: usize) -> Result<Tensor, ModelError> {
        let tape = scar_core::Tape::new();
        let cx = Ctx::new(&tape, store).with_frozen("cond.");
        Ok(self.forward(&cx, cx.constant(codes), b, t)?.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scar_core::rng::stream;
    use scar_core::Tape;

    fn build() -> (ModelConfig, ParamStore, Fdm, CondEncoder) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = stream(3, "fdm");
        let fdm = Fdm::new(&mut store, &cfg, &mut rng);
        let enc = CondEncoder::new(&mut store, cfg.d_z, &cfg, &mut rng);
        (cfg, store, fdm, enc)
    }

    #[test]
    fn zeroed_conditioning_equals_unconditioned() {
        let (cfg, mut store, fdm, enc) = build();
        // random modulation weights so that only the zero path can explain equality
        let mut rng = stream(4, "w");
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let n = store.get(id).numel();
            if name.ends_with("mod.w") {
                let vals: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
                store.set_values(id, &vals).unwrap();
            }
            if name.starts_with("cond.") {
                store.set_values(id, &vec![0.0; n]).unwrap();
            }
        }
        let (b, t) = (2, cfg.t);
        let v = Tensor::matrix(b * t, 12, (0..b * t * 12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let z = Tensor::matrix(b * (t - 1), 8, (0..b * (t - 1) * 8).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let tau: Vec<f64> = (0..b * t).map(|i| (i % 7) as f64 / 7.0).collect();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let c = enc.forward(&cx, cx.constant(&z), b, t).unwrap();
        let with = fdm.predict(&cx, cx.constant(&v), &tau, Cond::Tokens(c), b).unwrap().value();
        let without = fdm.predict(&cx, cx.constant(&v), &tau, Cond::None, b).unwrap().value();
        assert_eq!(with, without);
    }

    #[test]
    fn misaligned_conditioning() {
        let (cfg, store, fdm, _) = build();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let v = cx.constant(&Tensor::zeros(&[cfg.t, 12]));
        let c = cx.constant(&Tensor::zeros(&[cfg.t - 1, cfg.cond_width]));
        let err = fdm.predict(&cx, v, &vec![0.5; cfg.t], Cond::Tokens(c), 1);
        assert!(matches!(err, Err(ModelError::Misaligned { .. })));
    }

    #[test]
    fn conditioning_is_causal() {
        let (cfg, store, _, enc) = build();
        let t = cfg.t;
        let mut z = vec![0.0; (t - 1) * 8];
        let base = enc.tokens(&store, &Tensor::matrix(t - 1, 8, z.clone()).unwrap(), 1, t).unwrap();
        // transition 6 ends at frame 7: tokens before 7 must not move
        z[6 * 8] = 1.0;
        let moved = enc.tokens(&store, &Tensor::matrix(t - 1, 8, z).unwrap(), 1, t).unwrap();
        for f in 0..t {
            let same = base.row(f) == moved.row(f);
            assert_eq!(same, f != 7, "token {f}");
        }
    }
}
