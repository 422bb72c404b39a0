//! Minimal reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly with its result; [`Tape::backward`]
//! walks the records in reverse, accumulating vector-Jacobian products into
//! per-parameter gradient slots. The op set is exactly what the denoiser,
//! embedder and loss need — nothing speculative.

use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Input tensor; `param` is the gradient slot it reports into, if any.
    Leaf { param: Option<usize> },
    Add(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant tensor (masks).
    MulConst(Var, Tensor),
    /// `[C,H,W] + [C]` broadcast over spatial positions.
    AddChanBias(Var, Var),
    /// `[M,N] + [N]` broadcast over rows.
    AddRowBias(Var, Var),
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    Upsample2x(Var),
    /// `[M,K] × [K,N]`.
    MatMul(Var, Var),
    /// `[M,K] × [N,K]ᵀ`.
    MatMulNt(Var, Var),
    SoftmaxRows(Var),
    /// Concatenate two `[C,H,W]` tensors along channels.
    ConcatChan(Var, Var),
    ChwToTokens(Var),
    TokensToChw(Var),
    /// Select rows of a `[T,D]` matrix by index (attention over valid tokens).
    GatherRows(Var, Vec<usize>),
    /// Weighted sum of rows: `[T,D] → [D]`.
    RowWeightedSum(Var, Vec<f64>),
    /// Same data, new shape.
    Reshape(Var),
    /// Scalar `mean((pred − target)²)` against a constant target.
    MseLoss(Var, Tensor),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient buffers indexed by parameter slot.
pub type Grads = Vec<Option<Tensor>>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Parameter input reporting gradients into `slot`.
    pub fn param(&mut self, value: Tensor, slot: usize) -> Var {
        self.push(Op::Leaf { param: Some(slot) }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).add(self.val(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let v = self.val(a).mul(&c);
        self.push(Op::MulConst(a, c), v)
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(self.val(b).shape(), [xs[0]]);
        let sp = xs[1] * xs[2];
        let mut out = self.val(x).clone();
        {
            let bd = self.val(b).data().to_vec();
            let od = out.data_mut();
            for c in 0..xs[0] {
                for i in 0..sp {
                    od[c * sp + i] += bd[c];
                }
            }
        }
        self.push(Op::AddChanBias(x, b), out)
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = crate::tensor::mn(self.val(x));
        assert_eq!(self.val(b).shape(), [n]);
        let mut out = self.val(x).clone();
        {
            let bd = self.val(b).data().to_vec();
            let od = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    od[i * n + j] += bd[j];
                }
            }
        }
        self.push(Op::AddRowBias(x, b), out)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = tensor::silu(self.val(a));
        self.push(Op::Silu(a), v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = tensor::conv2d(self.val(x), self.val(w), self.val(b), stride, pad);
        self.push(Op::Conv2d { x, w, b, stride, pad }, v)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (v, stats) =
            tensor::group_norm(self.val(x), self.val(gamma), self.val(beta), groups, eps);
        self.push(Op::GroupNorm { x, gamma, beta, groups, stats }, v)
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = tensor::upsample2x(self.val(a));
        self.push(Op::Upsample2x(a), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.val(a), self.val(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul_nt(self.val(a), self.val(b));
        self.push(Op::MatMulNt(a, b), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.val(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = crate::tensor::chw(self.val(a));
        let (cb, h2, w2) = crate::tensor::chw(self.val(b));
        assert_eq!((h, w), (h2, w2), "concat spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.val(a).data());
        data.extend_from_slice(self.val(b).data());
        let v = Tensor::new(vec![ca + cb, h, w], data);
        self.push(Op::ConcatChan(a, b), v)
    }

    pub fn chw_to_tokens(&mut self, a: Var) -> Var {
        let v = tensor::chw_to_tokens(self.val(a));
        self.push(Op::ChwToTokens(a), v)
    }

    pub fn tokens_to_chw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = tensor::tokens_to_chw(self.val(a), h, w);
        self.push(Op::TokensToChw(a), v)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (_, n) = crate::tensor::mn(self.val(a));
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(&self.val(a).data()[i * n..(i + 1) * n]);
        }
        let v = Tensor::new(vec![idx.len(), n], data);
        self.push(Op::GatherRows(a, idx), v)
    }

    pub fn row_weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let (m, n) = crate::tensor::mn(self.val(a));
        assert_eq!(weights.len(), m);
        let mut out = vec![0.0; n];
        for (i, &wt) in weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            for j in 0..n {
                out[j] += wt * self.val(a).data()[i * n + j];
            }
        }
        let v = Tensor::new(vec![n], out);
        self.push(Op::RowWeightedSum(a, weights), v)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.val(a).clone().reshape(shape);
        self.push(Op::Reshape(a), v)
    }

    pub fn mse_loss(&mut self, pred: Var, target: Tensor) -> Var {
        assert_eq!(self.val(pred).shape(), target.shape());
        let n = target.numel() as f64;
        let loss = self
            .val(pred)
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push(Op::MseLoss(pred, target), Tensor::scalar(loss))
    }

    /// Reverse pass from a scalar `loss` node. Gradients for parameter leaves
    /// are accumulated into `grads[slot]` (allocated on first touch), so one
    /// buffer can collect over several tapes (gradient accumulation).
    pub fn backward(&self, loss: Var, n_slots: usize, grads: &mut Grads) {
        assert_eq!(self.val(loss).numel(), 1, "backward needs a scalar loss");
        grads.resize(n_slots, None);
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = node_grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(slot) = param {
                        match &mut grads[*slot] {
                            Some(acc) => acc.axpy(1.0, &g),
                            buf @ None => *buf = Some(g),
                        }
                    }
                }
                Op::Add(a, b) => {
                    accum(&mut node_grads, *a, g.clone());
                    accum(&mut node_grads, *b, g);
                }
                Op::Scale(a, c) => accum(&mut node_grads, *a, g.scale(*c)),
                Op::MulConst(a, c) => accum(&mut node_grads, *a, g.mul(c)),
                Op::AddChanBias(x, b) => {
                    let (c, h, w) = crate::tensor::chw(&g);
                    let sp = h * w;
                    let mut gb = vec![0.0; c];
                    for ci in 0..c {
                        gb[ci] = g.data()[ci * sp..(ci + 1) * sp].iter().sum();
                    }
                    accum(&mut node_grads, *b, Tensor::new(vec![c], gb));
                    accum(&mut node_grads, *x, g);
                }
                Op::AddRowBias(x, b) => {
                    let (m, n) = crate::tensor::mn(&g);
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g.data()[i * n + j];
                        }
                    }
                    accum(&mut node_grads, *b, Tensor::new(vec![n], gb));
                    accum(&mut node_grads, *x, g);
                }
                Op::Silu(a) => {
                    let gx = tensor::silu_grad(&g, self.val(*a));
                    accum(&mut node_grads, *a, gx);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let gx = tensor::conv2d_grad_x(
                        &g,
                        self.val(*x).shape(),
                        self.val(*w),
                        *stride,
                        *pad,
                    );
                    let (gw, gb) = tensor::conv2d_grad_w(
                        &g,
                        self.val(*x),
                        self.val(*w).shape(),
                        *stride,
                        *pad,
                    );
                    accum(&mut node_grads, *x, gx);
                    accum(&mut node_grads, *w, gw);
                    accum(&mut node_grads, *b, gb);
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (gx, ggamma, gbeta) =
                        tensor::group_norm_grad(&g, self.val(*x), self.val(*gamma), *groups, stats);
                    accum(&mut node_grads, *x, gx);
                    accum(&mut node_grads, *gamma, ggamma);
                    accum(&mut node_grads, *beta, gbeta);
                }
                Op::Upsample2x(a) => {
                    accum(&mut node_grads, *a, tensor::upsample2x_grad(&g));
                }
                Op::MatMul(a, b) => {
                    let ga = tensor::matmul_nt(&g, self.val(*b));
                    let gb = tensor::matmul_tn(self.val(*a), &g);
                    accum(&mut node_grads, *a, ga);
                    accum(&mut node_grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = tensor::matmul(&g, self.val(*b));
                    let gb = tensor::matmul_tn(&g, self.val(*a));
                    accum(&mut node_grads, *a, ga);
                    accum(&mut node_grads, *b, gb);
                }
                Op::SoftmaxRows(a) => {
                    let gx = tensor::softmax_rows_grad(&g, &self.nodes[id].value);
                    accum(&mut node_grads, *a, gx);
                }
                Op::ConcatChan(a, b) => {
                    let ca = self.val(*a).shape()[0];
                    let (c, h, w) = crate::tensor::chw(&g);
                    let sp = h * w;
                    let ga = Tensor::new(vec![ca, h, w], g.data()[..ca * sp].to_vec());
                    let gb = Tensor::new(vec![c - ca, h, w], g.data()[ca * sp..].to_vec());
                    accum(&mut node_grads, *a, ga);
                    accum(&mut node_grads, *b, gb);
                }
                Op::ChwToTokens(a) => {
                    let (_, h, w) = crate::tensor::chw(self.val(*a));
                    accum(&mut node_grads, *a, tensor::tokens_to_chw(&g, h, w));
                }
                Op::TokensToChw(a) => {
                    accum(&mut node_grads, *a, tensor::chw_to_tokens(&g));
                }
                Op::GatherRows(a, idx) => {
                    let (m, n) = crate::tensor::mn(self.val(*a));
                    let mut gx = vec![0.0; m * n];
                    for (row, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] += g.data()[row * n + j];
                        }
                    }
                    accum(&mut node_grads, *a, Tensor::new(vec![m, n], gx));
                }
                Op::RowWeightedSum(a, weights) => {
                    let (m, n) = crate::tensor::mn(self.val(*a));
                    let mut gx = vec![0.0; m * n];
                    for (i, &wt) in weights.iter().enumerate() {
                        for j in 0..n {
                            gx[i * n + j] = wt * g.data()[j];
                        }
                    }
                    accum(&mut node_grads, *a, Tensor::new(vec![m, n], gx));
                }
                Op::Reshape(a) => {
                    let shape = self.val(*a).shape().to_vec();
                    accum(&mut node_grads, *a, g.reshape(shape));
                }
                Op::MseLoss(pred, target) => {
                    let n = target.numel() as f64;
                    let gscale = 2.0 * g.data()[0] / n;
                    let gp = self.val(*pred).zip(target, |p, t| gscale * (p - t));
                    accum(&mut node_grads, *pred, gp);
                }
            }
        }
    }
}

fn accum(node_grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut node_grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

// ── Parameter binding ───────────────────────────────────────────────────────

/// Lazily injects [`ParamStore`] tensors onto a tape, memoizing the leaf so
/// each parameter appears exactly once per tape. Gradient slots coincide with
/// store indices.
#[derive(Default)]
pub struct ParamBinding {
    vars: Vec<Option<Var>>,
}

impl ParamBinding {
    pub fn new(store: &ParamStore) -> Self {
        ParamBinding { vars: vec![None; store.len()] }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Var {
        let idx = store.idx(name);
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let v = tape.param(store.by_idx(idx).clone(), idx);
        self.vars[idx] = Some(v);
        v
    }
}

// ── Numerical verification helper ───────────────────────────────────────────

/// Central finite difference of a scalar function of the parameter store with
/// respect to one element of one tensor. Used by gradient-correctness tests.
pub fn central_diff(
    f: &mut dyn FnMut(&ParamStore) -> f64,
    params: &ParamStore,
    name: &str,
    elem: usize,
    h: f64,
) -> f64 {
    let mut plus = params.clone();
    plus.get_mut(name).data_mut()[elem] += h;
    let mut minus = params.clone();
    minus.get_mut(name).data_mut()[elem] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}
