//! Neural building blocks: linear layers, MLPs, AdaLN modulation, causal
//! temporal convolution, single-head attention and sinusoidal time embeddings.

use rand::Rng;

use crate::error::TensorError;
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Binds parameters of one store onto one tape. Parameters whose name
/// starts with a frozen prefix enter as constants and receive no gradient.
pub struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    frozen: Vec<String>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Ctx {
            tape,
            store,
            frozen: Vec::new(),
        }
    }

    pub fn with_frozen(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let name = self.store.name(id);
        if self.frozen.iter().any(|f| name.starts_with(f.as_str())) {
            self.tape.frozen(self.store, id)
        } else {
            self.tape.param(self.store, id)
        }
    }

    pub fn constant(&self, t: &Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x.gelu(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

fn uniform(rng: &mut Stream, n: usize, bound: f64) -> Vec<f64> {
    (0..n)
        .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(±scale/√d_in)`.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, scale: f64, rng: &mut Stream) -> Self {
        let bound = scale / (d_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::matrix(d_in, d_out, uniform(rng, d_in * d_out, bound)).expect("sized"),
        );
        let b = store.add(format!("{name}.b"), Tensor::vector(uniform(rng, d_out, bound)));
        Linear { w, b, d_in, d_out }
    }

    /// Random weights, zero bias.
    pub fn new_zero_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        scale: f64,
        rng: &mut Stream,
    ) -> Self {
        let bound = scale / (d_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::matrix(d_in, d_out, uniform(rng, d_in * d_out, bound)).expect("sized"),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.matmul(cx.p(self.w)).add_bias(cx.p(self.b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        MlpSpec {
            widths,
            activation: Activation::Tanh,
            init_scale: 1.0,
        }
    }
}

/// Stack of linear layers with the activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, spec: &MlpSpec, rng: &mut Stream) -> Result<Self, TensorError> {
        if spec.widths.len() < 2 || spec.widths.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "mlp {name}: needs at least one layer with positive widths, got {:?}",
                spec.widths
            )));
        }
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], spec.init_scale, rng))
            .collect();
        Ok(Mlp {
            layers,
            activation: spec.activation,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(cx, h);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(h);
            }
        }
        h
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out
    }
}

/// AdaLN: `(1 + γ) ⊙ LN(h) + β` with `(β, γ) = W_mod c`.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub modulation: Linear,
    pub hidden: usize,
}

impl AdaLn {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, cond: usize, scale: f64, rng: &mut Stream) -> Self {
        AdaLn {
            modulation: Linear::new_zero_bias(store, &format!("{name}.mod"), cond, 2 * hidden, scale, rng),
            hidden,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, h: Var<'t>, c: Var<'t>) -> Result<Var<'t>, TensorError> {
        adaln_modulate(cx, h, c, &self.modulation)
    }
}

/// `(1 + γ) ⊙ LN(h) + β`, `(β, γ)` being the two halves of `w c` row by row.
pub fn adaln_modulate<'t>(cx: &Ctx<'t, '_>, h: Var<'t>, c: Var<'t>, w: &Linear) -> Result<Var<'t>, TensorError> {
    let hidden = h.cols();
    if w.d_out != 2 * hidden || c.cols() != w.d_in || c.rows() != h.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "adaln_modulate",
            left: h.shape(),
            right: c.shape(),
        });
    }
    let bg = w.forward(cx, c);
    let beta = bg.slice_cols(0, hidden);
    let gamma = bg.slice_cols(hidden, 2 * hidden);
    Ok(h.layer_norm().mul(gamma.offset(1.0)).add(beta))
}

/// Number of conditioning tokens produced from `t` frame-rate tokens.
pub fn causal_output_len(t: usize, stride: usize) -> Result<usize, TensorError> {
    if stride == 0 || t == 0 || (t - 1) % stride != 0 {
        return Err(TensorError::Invalid(format!(
            "causal conv: sequence length {t} is not 1 + k*{stride}"
        )));
    }
    Ok(1 + (t - 1) / stride)
}

/// Inclusive input index range seen by output token `f` (0-based).
pub fn causal_receptive_field(f: usize, stride: usize) -> std::ops::RangeInclusive<usize> {
    if f == 0 {
        0..=0
    } else {
        ((f - 1) * stride + 1)..=(f * stride)
    }
}

/// Strided causal temporal convolution with `stride` taps.
///
/// Output token 0 sees only input 0; output token `f ≥ 1` sees the block
/// `(f−1)·s+1 ..= f·s`. This is a kernel of `s` taps over the input left-padded
/// with `s − 1` zeros.
#[derive(Clone, Debug)]
pub struct CausalConv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl CausalConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        stride: usize,
        scale: f64,
        rng: &mut Stream,
    ) -> Self {
        assert!(stride >= 1, "causal conv stride must be at least 1");
        let lin = Linear::new(store, name, stride * d_in, d_out, scale, rng);
        CausalConv {
            w: lin.w,
            b: lin.b,
            stride,
            d_in,
            d_out,
        }
    }

    /// `z`: `[batch·t, d_in]`, episodes stacked; returns `[batch·F, d_out]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, z: Var<'t>, batch: usize, t: usize) -> Result<Var<'t>, TensorError> {
        let f = causal_output_len(t, self.stride)?;
        if z.rows() != batch * t || z.cols() != self.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "causal_temporal_conv",
                left: z.shape(),
                right: vec![batch * t, self.d_in],
            });
        }
        let s = self.stride;
        let mut idx = Vec::with_capacity(batch * f * s);
        for b in 0..batch {
            for out in 0..f {
                for k in 0..s {
                    let p = (out * s + k) as isize - (s as isize - 1);
                    idx.push((p >= 0).then(|| b * t + p as usize));
                }
            }
        }
        let windows = z.gather_rows(&idx).reshape(&[batch * f, s * self.d_in]);
        Ok(windows.matmul(cx.p(self.w)).add_bias(cx.p(self.b)))
    }
}

/// Additive attention mask: 0 where allowed, `-1e30` where blocked.
pub fn attention_mask(
    batch: usize,
    lq: usize,
    lk: usize,
    allow: impl Fn(usize, usize) -> bool,
) -> Tensor {
    let rows = batch * lq;
    let cols = batch * lk;
    let mut m = vec![-1e30; rows * cols];
    for b in 0..batch {
        for i in 0..lq {
            for j in 0..lk {
                if allow(i, j) {
                    m[(b * lq + i) * cols + b * lk + j] = 0.0;
                }
            }
        }
    }
    Tensor::matrix(rows, cols, m).expect("sized")
}

/// Single-head scaled dot-product attention with output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub width: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d_q: usize, d_kv: usize, width: usize, rng: &mut Stream) -> Self {
        Attention {
            q: Linear::new_zero_bias(store, &format!("{name}.q"), d_q, width, 1.0, rng),
            k: Linear::new_zero_bias(store, &format!("{name}.k"), d_kv, width, 1.0, rng),
            v: Linear::new_zero_bias(store, &format!("{name}.v"), d_kv, width, 1.0, rng),
            o: Linear::new_zero_bias(store, &format!("{name}.o"), width, d_q, 1.0, rng),
            width,
        }
    }

    /// `queries`: `[nq, d_q]`, `keys`: `[nk, d_kv]`, `mask`: `[nq, nk]` additive.
    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, queries: Var<'t>, keys: Var<'t>, mask: &Tensor) -> Var<'t> {
        let q = self.q.forward(cx, queries);
        let k = self.k.forward(cx, keys);
        let v = self.v.forward(cx, keys);
        let scores = q
            .matmul(k.transpose())
            .scale(1.0 / (self.width as f64).sqrt())
            .add(cx.constant(mask));
        let attn = scores.softmax_rows();
        self.o.forward(cx, attn.matmul(v))
    }
}

/// Sinusoidal embedding of `tau`: `width/2` sines then `width/2` cosines at
/// frequencies spaced geometrically from 1 to 1000.
pub fn time_embed(tau: f64, width: usize) -> Vec<f64> {
    assert!(width >= 2 && width % 2 == 0, "time embedding width must be even");
    let half = width / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                1000f64.powf(i as f64 / (half - 1) as f64)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(width);
    out.extend(freqs.iter().map(|w| (w * tau).sin()));
    out.extend(freqs.iter().map(|w| (w * tau).cos()));
    out
}

/// Frequencies used by [`time_embed`], one per sine/cosine pair.
pub fn time_embed_freqs(width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..half)
        .map(|i| if half == 1 { 1.0 } else { 1000f64.powf(i as f64 / (half - 1) as f64) })
        .collect()
}

/// Stacks embeddings of several `tau` values into `[n, width]`.
pub fn time_embed_rows(taus: &[f64], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(taus.len() * width);
    for &t in taus {
        data.extend(time_embed(t, width));
    }
    Tensor::matrix(taus.len(), width, data).expect("sized")
}
