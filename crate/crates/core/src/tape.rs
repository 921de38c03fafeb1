//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the information its backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid topological
//! order because a node can only reference nodes created before it.
//!
//! Tensors are treated as matrices whose last axis is the column axis; most
//! operations work row-wise over that view. The tape is rebuilt for every
//! forward pass and only first derivatives are supported.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::TensorError;
use crate::linalg::{gemm, Trans};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Reshape(usize),
    Gather(usize, Vec<Option<usize>>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    LayerNorm(usize, Vec<f64>),
    SoftmaxRows(usize),
    SoftmaxCe(usize, Vec<usize>, Vec<f64>),
    Grl(usize, f64),
    KlDiag(usize, usize),
    Reparam(usize, usize, Vec<f64>),
    Conv2d(Box<ConvSaved>),
    MaxPool2(usize, Vec<usize>),
    GlobalAvgPool(usize),
    LogDet(usize, Vec<f64>),
}

#[derive(Debug)]
struct ConvSaved {
    input: usize,
    weight: usize,
    bias: usize,
    cols: Vec<f64>,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::LayerNorm(..) => "layer_norm",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SoftmaxCe(..) => "softmax_cross_entropy",
            Op::Grl(..) => "grl",
            Op::KlDiag(..) => "kl_diag_gaussian",
            Op::Reparam(..) => "reparam_sample",
            Op::Conv2d(..) => "conv2d",
            Op::MaxPool2(..) => "max_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::LogDet(..) => "logdet_spd",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

impl Node {
    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
    fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.value.len() / c
        }
    }
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`; `None` when `v` is not
    /// reachable from the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Writes gradients of every bound parameter that the loss reached into
    /// the store. Unreached parameters keep an empty gradient slot.
    pub fn write_params(&self, tape: &Tape, store: &mut ParamStore) {
        let nodes = tape.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            if let Some(pid) = n.param {
                if let Some(g) = &self.grads[i] {
                    store.get_mut(pid).set_grad(g.clone());
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Node, b: &Node) {
    if a.shape != b.shape {
        panic!(
            "{}",
            TensorError::ShapeMismatch {
                op,
                left: a.shape.clone(),
                right: b.shape.clone(),
            }
        );
    }
}

fn acc(buf: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    buf.get_or_insert_with(|| vec![0.0; len])
}

fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation; returns value and derivative
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let v = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (v, d)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Var<'_> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter (inputs under test).
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the
    /// same node so gradients accumulate in one place.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes.borrow_mut()[v.id].param = Some(id);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// Binds a stored parameter as a constant: values flow forward, no
    /// gradient is recorded. Used for frozen components.
    pub fn frozen(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.constant(store.get(id))
    }

    /// First node holding a non-finite value, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        self.backward_with(loss, &[1.0])
    }

    /// Reverse pass seeded with an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var<'_>, seed: &[f64]) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[out.id].value.len(),
            seed.len(),
            "seed gradient has wrong length"
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.id] = Some(seed.to_vec());
        for i in (0..=out.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Grads { grads }
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            for (p, s) in [(a, 1.0), (b, 1.0)] {
                if needs(p) {
                    let buf = acc(&mut grads[p], g.len());
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
        }
        &Op::Sub(a, b) => {
            for (p, s) in [(a, 1.0), (b, -1.0)] {
                if needs(p) {
                    let buf = acc(&mut grads[p], g.len());
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                let bv = &nodes[b].value;
                let buf = acc(&mut grads[a], g.len());
                for k in 0..g.len() {
                    buf[k] += g[k] * bv[k];
                }
            }
            if needs(b) {
                let av = &nodes[a].value;
                let buf = acc(&mut grads[b], g.len());
                for k in 0..g.len() {
                    buf[k] += g[k] * av[k];
                }
            }
        }
        &Op::AddBias(a, b) => {
            if needs(a) {
                let buf = acc(&mut grads[a], g.len());
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if needs(b) {
                let m = nodes[b].value.len();
                let buf = acc(&mut grads[b], m);
                for row in g.chunks(m) {
                    buf.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::MulRow(a, b) => {
            let m = nodes[b].value.len();
            if needs(a) {
                let bv = &nodes[b].value;
                let buf = acc(&mut grads[a], g.len());
                for (k, x) in buf.iter_mut().enumerate() {
                    *x += g[k] * bv[k % m];
                }
            }
            if needs(b) {
                let av = &nodes[a].value;
                let buf = acc(&mut grads[b], m);
                for k in 0..g.len() {
                    buf[k % m] += g[k] * av[k];
                }
            }
        }
        &Op::Scale(a, s) => {
            let buf = acc(&mut grads[a], g.len());
            buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
        }
        &Op::Offset(a) | &Op::Reshape(a) => {
            let buf = acc(&mut grads[a], g.len());
            buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
        &Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            let (n, k) = (na.rows(), na.cols());
            let m = nb.cols();
            if needs(a) {
                // dA = dC · Bᵀ
                let buf = acc(&mut grads[a], n * k);
                gemm(n, m, k, g, Trans::No, &nb.value, Trans::Yes, buf, true);
            }
            if needs(b) {
                // dB = Aᵀ · dC
                let buf = acc(&mut grads[b], k * m);
                gemm(k, n, m, &na.value, Trans::Yes, g, Trans::No, buf, true);
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (nodes[a].rows(), nodes[a].cols());
            let buf = acc(&mut grads[a], r * c);
            for i in 0..r {
                for j in 0..c {
                    buf[i * c + j] += g[j * r + i];
                }
            }
        }
        &Op::Tanh(a) => {
            let y = &node.value;
            let buf = acc(&mut grads[a], g.len());
            for k in 0..g.len() {
                buf[k] += g[k] * (1.0 - y[k] * y[k]);
            }
        }
        &Op::Relu(a) => {
            let x = &nodes[a].value;
            let buf = acc(&mut grads[a], g.len());
            for k in 0..g.len() {
                if x[k] > 0.0 {
                    buf[k] += g[k];
                }
            }
        }
        &Op::Gelu(a) => {
            let x = &nodes[a].value;
            let buf = acc(&mut grads[a], g.len());
            for k in 0..g.len() {
                buf[k] += g[k] * gelu(x[k]).1;
            }
        }
        &Op::Exp(a) => {
            let y = &node.value;
            let buf = acc(&mut grads[a], g.len());
            for k in 0..g.len() {
                buf[k] += g[k] * y[k];
            }
        }
        &Op::Log(a) => {
            let x = &nodes[a].value;
            let buf = acc(&mut grads[a], g.len());
            for k in 0..g.len() {
                buf[k] += g[k] / x[k];
            }
        }
        &Op::Square(a) => {
            let x = &nodes[a].value;
            let buf = acc(&mut grads[a], g.len());
            for k in 0..g.len() {
                buf[k] += 2.0 * g[k] * x[k];
            }
        }
        &Op::Sum(a) => {
            let n = nodes[a].value.len();
            let buf = acc(&mut grads[a], n);
            buf.iter_mut().for_each(|x| *x += g[0]);
        }
        &Op::Mean(a) => {
            let n = nodes[a].value.len();
            let s = g[0] / n as f64;
            let buf = acc(&mut grads[a], n);
            buf.iter_mut().for_each(|x| *x += s);
        }
        &Op::RowSum(a) => {
            let c = nodes[a].cols();
            let n = nodes[a].value.len();
            let buf = acc(&mut grads[a], n);
            for (k, x) in buf.iter_mut().enumerate() {
                *x += g[k / c];
            }
        }
        Op::Gather(a, idx) => {
            let a = *a;
            let c = nodes[a].cols();
            let n = nodes[a].value.len();
            let buf = acc(&mut grads[a], n);
            for (r, src) in idx.iter().enumerate() {
                if let Some(s) = *src {
                    for j in 0..c {
                        buf[s * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total: usize = node.cols();
            let rows = node.rows();
            let mut off = 0;
            for &p in parts {
                let c = nodes[p].cols();
                if needs(p) {
                    let buf = acc(&mut grads[p], rows * c);
                    for r in 0..rows {
                        for j in 0..c {
                            buf[r * c + j] += g[r * total + off + j];
                        }
                    }
                }
                off += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if needs(p) {
                    let buf = acc(&mut grads[p], n);
                    buf.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(x, y)| *x += y);
                }
                off += n;
            }
        }
        &Op::SliceCols(a, start) => {
            let src_c = nodes[a].cols();
            let c = node.cols();
            let rows = node.rows();
            let buf = acc(&mut grads[a], nodes[a].value.len());
            for r in 0..rows {
                for j in 0..c {
                    buf[r * src_c + start + j] += g[r * c + j];
                }
            }
        }
        Op::LayerNorm(a, rstd) => {
            let a = *a;
            let c = node.cols();
            let y = &node.value;
            let buf = acc(&mut grads[a], g.len());
            for (r, &rs) in rstd.iter().enumerate() {
                let gy = &g[r * c..(r + 1) * c];
                let yy = &y[r * c..(r + 1) * c];
                let mg = gy.iter().sum::<f64>() / c as f64;
                let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    buf[r * c + j] += rs * (gy[j] - mg - yy[j] * mgy);
                }
            }
        }
        &Op::SoftmaxRows(a) => {
            let c = node.cols();
            let y = &node.value;
            let buf = acc(&mut grads[a], g.len());
            for r in 0..node.rows() {
                let gy = &g[r * c..(r + 1) * c];
                let yy = &y[r * c..(r + 1) * c];
                let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    buf[r * c + j] += yy[j] * (gy[j] - dot);
                }
            }
        }
        Op::SoftmaxCe(a, labels, probs) => {
            let a = *a;
            let c = nodes[a].cols();
            let n = labels.len() as f64;
            let buf = acc(&mut grads[a], probs.len());
            for (r, &l) in labels.iter().enumerate() {
                for j in 0..c {
                    let onehot = if j == l { 1.0 } else { 0.0 };
                    buf[r * c + j] += g[0] * (probs[r * c + j] - onehot) / n;
                }
            }
        }
        &Op::Grl(a, alpha) => {
            let buf = acc(&mut grads[a], g.len());
            buf.iter_mut().zip(g).for_each(|(x, y)| *x += -alpha * y);
        }
        &Op::KlDiag(mu, sigma) => {
            if needs(mu) {
                let m = &nodes[mu].value;
                let buf = acc(&mut grads[mu], m.len());
                for k in 0..m.len() {
                    buf[k] += g[0] * m[k];
                }
            }
            if needs(sigma) {
                let s = &nodes[sigma].value;
                let buf = acc(&mut grads[sigma], s.len());
                for k in 0..s.len() {
                    buf[k] += g[0] * (s[k] - 1.0 / s[k]);
                }
            }
        }
        Op::Reparam(mu, sigma, eps) => {
            let (mu, sigma) = (*mu, *sigma);
            if needs(mu) {
                let buf = acc(&mut grads[mu], g.len());
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if needs(sigma) {
                let buf = acc(&mut grads[sigma], g.len());
                for k in 0..g.len() {
                    buf[k] += g[k] * eps[k];
                }
            }
        }
        Op::Conv2d(s) => conv2d_backward(nodes, s, g, grads),
        Op::MaxPool2(a, arg) => {
            let a = *a;
            let buf = acc(&mut grads[a], nodes[a].value.len());
            for (k, &src) in arg.iter().enumerate() {
                buf[src] += g[k];
            }
        }
        &Op::GlobalAvgPool(a) => {
            let n = nodes[a].value.len();
            let per = n / g.len();
            let buf = acc(&mut grads[a], n);
            for (k, x) in buf.iter_mut().enumerate() {
                *x += g[k / per] / per as f64;
            }
        }
        Op::LogDet(a, inv) => {
            let a = *a;
            let buf = acc(&mut grads[a], inv.len());
            // d log det A / dA = A^{-T}; A is symmetric here.
            buf.iter_mut().zip(inv).for_each(|(x, y)| *x += g[0] * y);
        }
    }
}

fn conv2d_backward(nodes: &[Node], s: &ConvSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        k,
    } = s.geom;
    let hw = h * w;
    let ck = cin * k * k;
    if nodes[s.bias].requires_grad {
        let buf = acc(&mut grads[s.bias], cout);
        for img in 0..n {
            for o in 0..cout {
                let base = (img * cout + o) * hw;
                buf[o] += g[base..base + hw].iter().sum::<f64>();
            }
        }
    }
    if nodes[s.weight].requires_grad {
        let buf = acc(&mut grads[s.weight], cout * ck);
        for img in 0..n {
            let gi = &g[img * cout * hw..(img + 1) * cout * hw];
            let cols = &s.cols[img * ck * hw..(img + 1) * ck * hw];
            gemm(cout, hw, ck, gi, Trans::No, cols, Trans::Yes, buf, true);
        }
    }
    if nodes[s.input].requires_grad {
        let wv = &nodes[s.weight].value;
        let buf = acc(&mut grads[s.input], n * cin * hw);
        let mut dcols = vec![0.0; ck * hw];
        let pad = k / 2;
        for img in 0..n {
            let gi = &g[img * cout * hw..(img + 1) * cout * hw];
            dcols.iter_mut().for_each(|x| *x = 0.0);
            gemm(ck, cout, hw, wv, Trans::Yes, gi, Trans::No, &mut dcols, false);
            let dst = &mut buf[img * cin * hw..(img + 1) * cin * hw];
            for c in 0..cin {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        for y in 0..h {
                            let sy = y as isize + ki as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for x in 0..w {
                                let sx = x as isize + kj as isize - pad as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                dst[c * hw + sy as usize * w + sx as usize] +=
                                    dcols[row * hw + y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn rows(&self) -> usize {
        self.node().rows()
    }

    pub fn cols(&self) -> usize {
        self.node().cols()
    }

    pub fn value(&self) -> Vec<f64> {
        self.node().value.clone()
    }

    pub fn item(&self) -> f64 {
        let n = self.node();
        assert_eq!(n.value.len(), 1, "item() on a non-scalar var");
        n.value[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.node();
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let (shape, value) = {
            let n = self.node();
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(shape, value, op, rg)
    }

    fn binary(&self, o: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[o.id]);
            same_shape(name, a, b);
            (
                a.shape.clone(),
                a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        let rg = self.tape.rg(&[self.id, o.id]);
        self.tape.push(shape, value, op, rg)
    }

    pub fn add(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "add", |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn sub(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "sub", |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn mul(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "mul", |a, b| a * b, Op::Mul(self.id, o.id))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&self, b: Var<'t>) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, bb) = (&nodes[self.id], &nodes[b.id]);
            let m = bb.value.len();
            assert_eq!(x.cols(), m, "add_bias: width {} vs bias {}", x.cols(), m);
            (
                x.shape.clone(),
                x.value
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v + bb.value[k % m])
                    .collect(),
            )
        };
        let rg = self.tape.rg(&[self.id, b.id]);
        self.tape.push(shape, value, Op::AddBias(self.id, b.id), rg)
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&self, b: Var<'t>) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, bb) = (&nodes[self.id], &nodes[b.id]);
            let m = bb.value.len();
            assert_eq!(x.cols(), m, "mul_row: width {} vs row {}", x.cols(), m);
            (
                x.shape.clone(),
                x.value
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v * bb.value[k % m])
                    .collect(),
            )
        };
        let rg = self.tape.rg(&[self.id, b.id]);
        self.tape.push(shape, value, Op::MulRow(self.id, b.id), rg)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(|x| s * x, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::Offset(self.id))
    }

    /// `[n, k] x [k, m] -> [n, m]`; leading axes of `self` are flattened into rows.
    pub fn matmul(&self, o: Var<'t>) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[o.id]);
            let (n, k) = (a.rows(), a.cols());
            assert_eq!(b.shape.len(), 2, "matmul: right operand must be 2-D");
            if b.shape[0] != k {
                panic!(
                    "{}",
                    TensorError::ShapeMismatch {
                        op: "matmul",
                        left: a.shape.clone(),
                        right: b.shape.clone(),
                    }
                );
            }
            let m = b.shape[1];
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, &a.value, Trans::No, &b.value, Trans::No, &mut out, false);
            let mut shape = a.shape.clone();
            if shape.is_empty() {
                shape.push(1);
            }
            *shape.last_mut().expect("non-empty") = m;
            (shape, out)
        };
        let rg = self.tape.rg(&[self.id, o.id]);
        self.tape.push(shape, value, Op::MatMul(self.id, o.id), rg)
    }

    pub fn transpose(&self) -> Var<'t> {
        let (shape, value) = {
            let n = self.node();
            let (r, c) = (n.rows(), n.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = n.value[i * c + j];
                }
            }
            (vec![c, r], out)
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(shape, value, Op::Transpose(self.id), rg)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(|x| gelu(x).0, Op::Gelu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.node().value.iter().sum();
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(vec![], vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let s = {
            let n = self.node();
            n.value.iter().sum::<f64>() / n.value.len() as f64
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(vec![], vec![s], Op::Mean(self.id), rg)
    }

    /// Sum over the last axis: `[n, c] -> [n]`.
    pub fn row_sum(&self) -> Var<'t> {
        let value: Vec<f64> = {
            let n = self.node();
            let c = n.cols();
            n.value.chunks(c).map(|r| r.iter().sum()).collect()
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape
            .push(vec![value.len()], value, Op::RowSum(self.id), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let value = {
            let n = self.node();
            assert_eq!(
                shape.iter().product::<usize>(),
                n.value.len(),
                "reshape: {:?} -> {:?}",
                n.shape,
                shape
            );
            n.value.clone()
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), rg)
    }

    /// Selects rows by index; `None` yields a zero row.
    pub fn gather_rows(&self, idx: &[Option<usize>]) -> Var<'t> {
        let (c, value) = {
            let n = self.node();
            let c = n.cols();
            let rows = n.rows();
            let mut out = vec![0.0; idx.len() * c];
            for (r, src) in idx.iter().enumerate() {
                if let Some(s) = *src {
                    assert!(s < rows, "gather_rows: index {s} >= {rows}");
                    out[r * c..(r + 1) * c].copy_from_slice(&n.value[s * c..(s + 1) * c]);
                }
            }
            (c, out)
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape
            .push(vec![idx.len(), c], value, Op::Gather(self.id, idx.to_vec()), rg)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Var<'t> {
        let idx: Vec<Option<usize>> = idx.iter().map(|&i| Some(i)).collect();
        self.gather_rows(&idx)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'t> {
        let idx: Vec<Option<usize>> = (start..end).map(Some).collect();
        self.gather_rows(&idx)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        let (rows, value) = {
            let n = self.node();
            let c = n.cols();
            assert!(start <= end && end <= c, "slice_cols {start}..{end} of {c}");
            let rows = n.rows();
            let mut out = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                out.extend_from_slice(&n.value[r * c + start..r * c + end]);
            }
            (rows, out)
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape
            .push(vec![rows, end - start], value, Op::SliceCols(self.id, start), rg)
    }

    pub fn layer_norm(&self) -> Var<'t> {
        let (shape, value, rstd) = {
            let n = self.node();
            let c = n.cols();
            let mut out = vec![0.0; n.value.len()];
            let mut rstd = Vec::with_capacity(n.rows());
            for (r, row) in n.value.chunks(c).enumerate() {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..c {
                    out[r * c + j] = (row[j] - mean) * rs;
                }
                rstd.push(rs);
            }
            (n.shape.clone(), out, rstd)
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape
            .push(shape, value, Op::LayerNorm(self.id, rstd), rg)
    }

    /// `gain ⊙ LN(h) + bias` over the last axis.
    pub fn layer_norm_affine(&self, gain: Var<'t>, bias: Var<'t>) -> Var<'t> {
        self.layer_norm().mul_row(gain).add_bias(bias)
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let (shape, value) = {
            let n = self.node();
            let c = n.cols();
            let mut out = vec![0.0; n.value.len()];
            for (r, row) in n.value.chunks(c).enumerate() {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - mx).exp();
                    out[r * c + j] = e;
                    z += e;
                }
                out[r * c..(r + 1) * c].iter_mut().for_each(|x| *x /= z);
            }
            (n.shape.clone(), out)
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(shape, value, Op::SoftmaxRows(self.id), rg)
    }

    /// Mean over rows of `-log softmax(logits_row)[label]`.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>, TensorError> {
        let (loss, probs) = {
            let n = self.node();
            let c = n.cols();
            if n.rows() != labels.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    left: n.shape.clone(),
                    right: vec![labels.len()],
                });
            }
            let mut probs = vec![0.0; n.value.len()];
            let mut loss = 0.0;
            for (r, row) in n.value.chunks(c).enumerate() {
                let l = labels[r];
                if l >= c {
                    return Err(TensorError::LabelOutOfRange {
                        op: "softmax_cross_entropy",
                        row: r,
                        label: l,
                        classes: c,
                    });
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                for j in 0..c {
                    probs[r * c + j] = (row[j] - lse).exp();
                }
                loss += lse - row[l];
            }
            (loss / labels.len().max(1) as f64, probs)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(
            vec![],
            vec![loss],
            Op::SoftmaxCe(self.id, labels.to_vec(), probs),
            rg,
        ))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-alpha` backward.
    pub fn grl(&self, alpha: f64) -> Var<'t> {
        assert!(alpha >= 0.0, "grl strength must be non-negative");
        self.unary(|x| x, Op::Grl(self.id, alpha))
    }

    /// `½ Σ (μ² + σ² − 1 − ln σ²)` against a standard normal prior.
    pub fn kl_diag_gaussian(&self, sigma: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (m, s) = (&nodes[self.id], &nodes[sigma.id]);
            if m.shape != s.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "kl_diag_gaussian",
                    left: m.shape.clone(),
                    right: s.shape.clone(),
                });
            }
            let mut kl = 0.0;
            for (i, (&mu, &sd)) in m.value.iter().zip(&s.value).enumerate() {
                if !(sd > 0.0) {
                    return Err(TensorError::Domain {
                        op: "kl_diag_gaussian",
                        index: i,
                        value: sd,
                        reason: "sigma must be strictly positive",
                    });
                }
                kl += mu * mu + sd * sd - 1.0 - (sd * sd).ln();
            }
            0.5 * kl
        };
        let rg = self.tape.rg(&[self.id, sigma.id]);
        Ok(self
            .tape
            .push(vec![], vec![value], Op::KlDiag(self.id, sigma.id), rg))
    }

    /// `μ + σ ⊙ ε` with caller-supplied `ε`; no gradient flows to `ε`.
    pub fn reparam_sample(&self, sigma: Var<'t>, eps: &[f64]) -> Result<Var<'t>, TensorError> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (m, s) = (&nodes[self.id], &nodes[sigma.id]);
            if m.shape != s.shape || m.value.len() != eps.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reparam_sample",
                    left: m.shape.clone(),
                    right: if m.shape != s.shape {
                        s.shape.clone()
                    } else {
                        vec![eps.len()]
                    },
                });
            }
            (
                m.shape.clone(),
                m.value
                    .iter()
                    .zip(&s.value)
                    .zip(eps)
                    .map(|((mu, sd), e)| mu + sd * e)
                    .collect(),
            )
        };
        let rg = self.tape.rg(&[self.id, sigma.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::Reparam(self.id, sigma.id, eps.to_vec()),
            rg,
        ))
    }

    /// Same-padding stride-1 convolution. `self`: `[n, cin, h, w]`,
    /// `weight`: `[cout, cin, k, k]` with odd `k`, `bias`: `[cout]`.
    pub fn conv2d(&self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (geom, cols, out) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wn, bn) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            assert_eq!(x.shape.len(), 4, "conv2d input must be [n, c, h, w]");
            assert_eq!(wn.shape.len(), 4, "conv2d weight must be [cout, cin, k, k]");
            let (n, cin, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (cout, k) = (wn.shape[0], wn.shape[2]);
            assert_eq!(wn.shape[1], cin, "conv2d channel mismatch");
            assert_eq!(k % 2, 1, "conv2d kernel must be odd");
            assert_eq!(bn.value.len(), cout);
            let geom = ConvGeom {
                n,
                cin,
                h,
                w,
                cout,
                k,
            };
            let hw = h * w;
            let ck = cin * k * k;
            let pad = k / 2;
            let mut cols = vec![0.0; n * ck * hw];
            for img in 0..n {
                let src = &x.value[img * cin * hw..(img + 1) * cin * hw];
                let dst = &mut cols[img * ck * hw..(img + 1) * ck * hw];
                for c in 0..cin {
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = (c * k + ki) * k + kj;
                            for y in 0..h {
                                let sy = y as isize + ki as isize - pad as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for xx in 0..w {
                                    let sx = xx as isize + kj as isize - pad as isize;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    dst[row * hw + y * w + xx] =
                                        src[c * hw + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
            let mut out = vec![0.0; n * cout * hw];
            for img in 0..n {
                let o = &mut out[img * cout * hw..(img + 1) * cout * hw];
                for (oc, chunk) in o.chunks_mut(hw).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bn.value[oc]);
                }
                gemm(
                    cout,
                    ck,
                    hw,
                    &wn.value,
                    Trans::No,
                    &cols[img * ck * hw..(img + 1) * ck * hw],
                    Trans::No,
                    o,
                    true,
                );
            }
            (geom, cols, out)
        };
        let rg = self.tape.rg(&[self.id, weight.id, bias.id]);
        self.tape.push(
            vec![geom.n, geom.cout, geom.h, geom.w],
            out,
            Op::Conv2d(Box::new(ConvSaved {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                cols,
                geom,
            })),
            rg,
        )
    }

    /// 2x2 max pooling with stride 2 on `[n, c, h, w]` (h, w even).
    pub fn max_pool2(&self) -> Var<'t> {
        let (shape, out, arg) = {
            let x = self.node();
            assert_eq!(x.shape.len(), 4);
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut arg = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = base + 2 * y * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = base + (2 * y + dy) * w + 2 * xx + dx;
                            if x.value[i] > x.value[best] {
                                best = i;
                            }
                        }
                        out.push(x.value[best]);
                        arg.push(best);
                    }
                }
            }
            (vec![n, c, oh, ow], out, arg)
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(shape, out, Op::MaxPool2(self.id, arg), rg)
    }

    /// Mean over spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self) -> Var<'t> {
        let (shape, out) = {
            let x = self.node();
            assert_eq!(x.shape.len(), 4);
            let (n, c) = (x.shape[0], x.shape[1]);
            let per = x.shape[2] * x.shape[3];
            let out = x
                .value
                .chunks(per)
                .map(|p| p.iter().sum::<f64>() / per as f64)
                .collect();
            (vec![n, c], out)
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(shape, out, Op::GlobalAvgPool(self.id), rg)
    }

    /// `log det A` for a symmetric positive-definite square matrix.
    pub fn logdet_spd(&self) -> Result<Var<'t>, TensorError> {
        let (ld, inv) = {
            let x = self.node();
            let n = x.cols();
            if x.shape.len() != 2 || x.rows() != n {
                return Err(TensorError::Invalid(format!(
                    "logdet_spd needs a square matrix, got {:?}",
                    x.shape
                )));
            }
            let m = nalgebra::DMatrix::from_row_slice(n, n, &x.value);
            let chol = nalgebra::Cholesky::new(m).ok_or_else(|| {
                TensorError::Invalid("logdet_spd: matrix is not positive definite".into())
            })?;
            let ld = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let inv = chol.inverse();
            let mut flat = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    flat.push(inv[(i, j)]);
                }
            }
            (ld, flat)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(vec![], vec![ld], Op::LogDet(self.id, inv), rg))
    }

    /// Mean squared difference.
    pub fn mse(&self, target: Var<'t>) -> Var<'t> {
        self.sub(target).square().mean()
    }
}

/// Concatenates along the last axis; all parts must have the same row count.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let tape = parts[0].tape;
    let (rows, total, value) = {
        let nodes = tape.nodes.borrow();
        let rows = nodes[parts[0].id].rows();
        let total: usize = parts.iter().map(|p| nodes[p.id].cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for p in parts {
            let n = &nodes[p.id];
            assert_eq!(n.rows(), rows, "concat_cols: row count mismatch");
            let c = n.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c]
                    .copy_from_slice(&n.value[r * c..(r + 1) * c]);
            }
            off += c;
        }
        (rows, total, out)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.rg(&ids);
    tape.push(vec![rows, total], value, Op::ConcatCols(ids), rg)
}

/// Stacks along the first axis; all parts must have the same column count.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let tape = parts[0].tape;
    let (rows, cols, value) = {
        let nodes = tape.nodes.borrow();
        let cols = nodes[parts[0].id].cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let n = &nodes[p.id];
            assert_eq!(n.cols(), cols, "concat_rows: column count mismatch");
            rows += n.rows();
            out.extend_from_slice(&n.value);
        }
        (rows, cols, out)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.rg(&ids);
    tape.push(vec![rows, cols], value, Op::ConcatRows(ids), rg)
}
