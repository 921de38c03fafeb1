//! Action-to-latent controller: a one-layer transformer decoder whose queries
//! are raw commands and whose memory is the encoded visual context.

use scar_core::nn::{attention_mask, time_embed_rows, Activation, Attention, Ctx, Linear, Mlp, MlpSpec};
use scar_core::rng::Stream;
use scar_core::{ParamStore, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum A2lMode {
    /// Causal attention over the command history and cross-attention to context.
    Sequence,
    /// Same decoder with the context zeroed and each command attending only to itself.
    Pointwise,
}

impl A2lMode {
    pub fn name(self) -> &'static str {
        match self {
            A2lMode::Sequence => "sequence",
            A2lMode::Pointwise => "pointwise",
        }
    }
}

#[derive(Clone, Debug)]
pub struct A2l {
    q_in: Linear,
    ctx_in: Mlp,
    self_attn: Attention,
    cross_attn: Attention,
    mlp: Mlp,
    out: Linear,
    pub mode: A2lMode,
    pub f_ctx: usize,
    pub width: usize,
    pub t: usize,
}

impl A2l {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, mode: A2lMode, rng: &mut Stream) -> Result<Self, ModelError> {
        let w = cfg.a2l_width;
        let gelu = |widths| MlpSpec {
            widths,
            activation: Activation::Gelu,
            init_scale: 1.0,
        };
        Ok(A2l {
            q_in: Linear::new(store, "a2l.q_in", cfg.d_a, w, 1.0, rng),
            ctx_in: Mlp::new(store, "a2l.ctx", &gelu(vec![cfg.d_v, w, w]), rng)?,
            self_attn: Attention::new(store, "a2l.self", w, w, w, rng),
            cross_attn: Attention::new(store, "a2l.cross", w, w, w, rng),
            mlp: Mlp::new(store, "a2l.mlp", &gelu(vec![w, 2 * w, w]), rng)?,
            out: Linear::new_zero_bias(store, "a2l.out", w, cfg.d_z, 1.0, rng),
            mode,
            f_ctx: cfg.f_hist,
            width: w,
            t: cfg.t,
        })
    }

    fn positions(&self, b: usize, n: usize) -> Tensor {
        let taus: Vec<f64> = (0..b)
            .flat_map(|_| (0..n).map(|i| i as f64 / self.t as f64))
            .collect();
        time_embed_rows(&taus, self.width)
    }

    /// `actions`: `[b·L, d_a]`, `context`: `[b·f_ctx, d_v]` → `[b·L, d_z]`.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        actions: Var<'t>,
        context: Var<'t>,
        b: usize,
    ) -> Result<Var<'t>, ModelError> {
        if b == 0 || actions.rows() % b != 0 {
            return Err(ModelError::Misaligned {
                expected: b,
                got: actions.rows(),
            });
        }
        if context.rows() != b * self.f_ctx {
            return Err(ModelError::Misaligned {
                expected: b * self.f_ctx,
                got: context.rows(),
            });
        }
        let l = actions.rows() / b;
        let mut h = self.q_in.forward(cx, actions).add(cx.constant(&self.positions(b, l)));
        let self_mask = match self.mode {
            A2lMode::Sequence => attention_mask(b, l, l, |i, j| j <= i),
            A2lMode::Pointwise => attention_mask(b, l, l, |i, j| j == i),
        };
        let n = h.layer_norm();
        h = h.add(self.self_attn.forward(cx, n, n, &self_mask));
        let memory = match self.mode {
            A2lMode::Sequence => self
                .ctx_in
                .forward(cx, context)
                .add(cx.constant(&self.positions(b, self.f_ctx))),
            A2lMode::Pointwise => cx.constant(&Tensor::zeros(&[b * self.f_ctx, self.width])),
        };
        let cross_mask = attention_mask(b, l, self.f_ctx, |_, _| true);
        h = h.add(self.cross_attn.forward(cx, h.layer_norm(), memory, &cross_mask));
        h = h.add(self.mlp.forward(cx, h.layer_norm()));
        Ok(self.out.forward(cx, h))
    }

    /// Predicted latent actions without recording gradients; empty for empty input.
    pub fn predict(&self, store: &ParamStore, actions: &Tensor, context: &Tensor, b: usize) -> Result<Vec<f64>, ModelError> {
        if actions.rows() == 0 || actions.numel() == 0 {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store).with_frozen("a2l.");
        Ok(self.forward(&cx, cx.constant(actions), cx.constant(context), b)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scar_core::rng::stream;

    fn build(mode: A2lMode) -> (ModelConfig, ParamStore, A2l) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let a2l = A2l::new(&mut store, &cfg, mode, &mut stream(5, "a2l")).unwrap();
        (cfg, store, a2l)
    }

    fn inputs(cfg: &ModelConfig, b: usize) -> (Tensor, Tensor) {
        let l = cfg.t - 1;
        let a = Tensor::matrix(b * l, cfg.d_a, (0..b * l * cfg.d_a).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
        let c = Tensor::matrix(
            b * cfg.f_hist,
            cfg.d_v,
            (0..b * cfg.f_hist * cfg.d_v).map(|i| (i as f64 * 0.17).cos()).collect(),
        )
        .unwrap();
        (a, c)
    }

    #[test]
    fn deterministic_and_empty() {
        let (cfg, store, a2l) = build(A2lMode::Sequence);
        let (a, c) = inputs(&cfg, 2);
        let p1 = a2l.predict(&store, &a, &c, 2).unwrap();
        assert_eq!(p1.len(), 2 * 16 * cfg.d_z);
        assert_eq!(p1, a2l.predict(&store, &a, &c, 2).unwrap());
        let empty = Tensor::zeros(&[0, cfg.d_a]);
        assert!(a2l.predict(&store, &empty, &c, 2).unwrap().is_empty());
    }

    #[test]
    fn pointwise_ignores_context_and_history() {
        let (cfg, store, a2l) = build(A2lMode::Pointwise);
        let (a, c) = inputs(&cfg, 1);
        let base = a2l.predict(&store, &a, &c, 1).unwrap();
        let other_ctx = Tensor::matrix(cfg.f_hist, cfg.d_v, vec![0.9; cfg.f_hist * cfg.d_v]).unwrap();
        assert_eq!(base, a2l.predict(&store, &a, &other_ctx, 1).unwrap());
        let mut a2 = a.clone();
        a2.data_mut()[0] += 1.0;
        let moved = a2l.predict(&store, &a2, &c, 1).unwrap();
        // only the first command's own output may change (positions differ per row)
        assert_ne!(&base[..cfg.d_z], &moved[..cfg.d_z]);
        assert_eq!(&base[cfg.d_z..], &moved[cfg.d_z..]);
    }

    #[test]
    fn sequence_is_causal_in_commands() {
        let (cfg, store, a2l) = build(A2lMode::Sequence);
        let (a, c) = inputs(&cfg, 1);
        let base = a2l.predict(&store, &a, &c, 1).unwrap();
        let mut a2 = a.clone();
        a2.data_mut()[5 * cfg.d_a] += 1.0;
        let moved = a2l.predict(&store, &a2, &c, 1).unwrap();
        assert_eq!(&base[..5 * cfg.d_z], &moved[..5 * cfg.d_z]);
        assert_ne!(&base[5 * cfg.d_z..], &moved[5 * cfg.d_z..]);
    }
}
