//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records operations in execution order, so the node list is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Nodes that cannot reach a trainable leaf are stored as plain
//! values with no saved backward state; this is how frozen layers run in
//! "no-grad" mode.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rope::RowRotations;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Gelu(Var),
    Rope(Var, Rc<RowRotations>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mse(Var, Var),
    MaskedMse { a: Var, b: Var, mask: Vec<f64>, denom: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Softmax(x) | Op::Gelu(x) | Op::Rope(x, _) | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SliceCols { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::MaskedMse { a, b, .. } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for values that do not depend on any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn check2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of nodes holding saved state for the backward pass.
    pub fn retained_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf)).count()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        let value = value.ensure_finite(op_name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let t = t.ensure_finite("param")?;
        self.nodes.push(Node { value: t, requires_grad: true, op: Op::Leaf });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.into(), v));
        Ok(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let t = t.ensure_finite("constant")?;
        self.nodes.push(Node { value: t, requires_grad: false, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Value identity that blocks all upstream gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check2("matmul", self.value(a))?;
        let (k2, n) = check2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check2("matmul_nt", self.value(a))?;
        let (n, k2) = check2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_nt", Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::shape("add_bias", format!("bias of {} for {n} columns", tb.len())));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale(x, c))
    }

    /// `x · W + b` for a weight stored as `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Row-wise normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", format!("width {d} vs gain/bias")));
        }
        let rows = tx.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = softmax_rows(self.value(x));
        self.push("softmax_rows", t, Op::Softmax(x))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| 0.5 * v * (1.0 + erf(v * INV_SQRT_2)));
        self.push("gelu", t, Op::Gelu(x))
    }

    /// Rotates the leading `2·pairs` columns of each row.
    pub fn rope(&mut self, x: Var, rot: Rc<RowRotations>) -> Result<Var> {
        let tx = self.value(x);
        if rot.rows() != tx.rows() || 2 * rot.pairs > tx.cols() {
            return Err(Error::shape(
                "rope",
                format!("{} rotation rows / {} pairs for {:?}", rot.rows(), rot.pairs, tx.shape()),
            ));
        }
        let mut t = tx.clone();
        let cols = t.cols();
        rot.rotate_in_place(t.data_mut(), cols, false);
        self.push("rope", t, Op::Rope(x, rot))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = check2("slice_cols", tx)?;
        if start + len > cols {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {cols}", start + len)));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        self.push("slice_cols", t, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = check2("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x).gather_rows(idx)?;
        self.push("gather_rows", t, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, Op::Sum(x))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.is_empty() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / ta.len() as f64);
        self.push("mse", t, Op::Mse(a, b))
    }

    /// Squared error averaged over entries where `mask` is non-zero.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: &[f64]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || mask.len() != ta.len() {
            return Err(Error::shape("masked_mse", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let denom: f64 = mask.iter().sum();
        if denom <= 0.0 {
            return Err(Error::Contract("masked_mse with an empty mask".into()));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .zip(mask)
            .map(|((x, y), m)| m * (x - y) * (x - y))
            .sum();
        let t = Tensor::scalar(s / denom);
        self.push("masked_mse", t, Op::MaskedMse { a, b, mask: mask.to_vec(), denom })
    }

    /// Mean softmax cross-entropy of `logits` (M×C) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = check2("cross_entropy", tl)?;
        if labels.len() != m || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", format!("{} labels for {m}x{c} logits", labels.len())));
        }
        let probs = softmax_rows(tl);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = tl.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let t = Tensor::scalar(loss / m as f64);
        self.push("cross_entropy", t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs: probs.into_data() })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accumulate(grads, *a, |ga| gemm_nt_acc(ga, gd, tb.data(), m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn_acc(gb, ta.data(), gd, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                self.accumulate(grads, *a, |ga| gemm_acc(ga, gd, tb.data(), m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn_acc(gb, gd, ta.data(), m, n, k));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(gd).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(gd).zip(tb).for_each(|((o, v), y)| *o += v * y)
                });
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(gd).zip(ta).for_each(|((o, v), x)| *o += v * x)
                });
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                let n = self.value(*b).len();
                self.accumulate(grads, *b, |gb| {
                    for row in gd.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(gd).for_each(|(o, v)| *o += c * v));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*x).cols();
                let gn = self.value(*gain).data();
                let rows = inv_std.len();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gn[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let scale = inv_std[r] / d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gn[c];
                            gx[r * d + c] += scale * (d as f64 * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += gd[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for row in gd.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &v), &gv) in gx.iter_mut().zip(tx).zip(gd) {
                        let cdf = 0.5 * (1.0 + erf(v * INV_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                        *o += gv * (cdf + v * pdf);
                    }
                });
            }
            Op::Rope(x, rot) => {
                let cols = node.value.cols();
                let mut back = gd.to_vec();
                rot.rotate_in_place(&mut back, cols, true);
                self.accumulate(grads, *x, |gx| add_into(gx, &back));
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let len = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for (r, grow) in gd.chunks(len.max(1)).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (r, prow) in gp.chunks_mut(w.max(1)).enumerate() {
                            add_into(prow, &gd[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &gd[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |gp| add_into(gp, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gd[0] / ta.len() as f64;
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(ta.iter().zip(tb)).for_each(|(o, (x, y))| *o += k * (x - y))
                });
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(ta.iter().zip(tb)).for_each(|(o, (x, y))| *o -= k * (x - y))
                });
            }
            Op::MaskedMse { a, b, mask, denom } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gd[0] / denom;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += k * mask[i] * (ta[i] - tb[i]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= k * mask[i] * (ta[i] - tb[i]);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let m = labels.len() as f64;
                let s = gd[0];
                self.accumulate(grads, *logits, |gl| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot) / m;
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Gradients of every trainable leaf registered through [`Graph::param`],
    /// keyed by name. Leaves the loss does not depend on get a zero tensor.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
