//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive executed through a [`Var`] handle.
//! Nodes whose inputs all lack `requires_grad` are stored as constants, so
//! an inference pass leaves no backward bookkeeping behind. [`Tape::backward`]
//! walks the recorded nodes in exact reverse order and accumulates gradients
//! additively into every participating ancestor.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::tensor::{gemm, matmul_raw, transpose_raw, Tensor};

/// Layer-norm epsilon inside the variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    Transpose(usize),
    Sum(usize),
    Reshape(usize),
    /// Custom vector-Jacobian product: `d out / d input` is a fixed tensor
    /// captured at forward time (used by scalar losses such as the
    /// transducer alignment loss).
    ScalarVjp {
        input: usize,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.grads.clear();
    }

    /// Records a leaf. Gradients are collected only when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        inner.grads.push(None);
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Gradient of the most recent backward pass with respect to `var`.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.inner.borrow().grads[var.id].clone()
    }

    /// Propagates gradients from a scalar `loss`. Returns the ids of the
    /// nodes whose backward rule ran, in visiting order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Vec<usize>> {
        let mut inner = self.inner.borrow_mut();
        let loss_value = Arc::clone(&inner.nodes[loss.id].value);
        if loss_value.len() != 1 || loss_value.shape().len() > 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        if !inner.nodes[loss.id].requires_grad {
            return Ok(Vec::new());
        }
        inner.grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));
        let mut visited = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = inner.grads[id].take() else {
                continue;
            };
            let Inner { nodes, grads } = &mut *inner;
            let node = &nodes[id];
            if !matches!(node.op, Op::Leaf) {
                visited.push(id);
                backprop(nodes, grads, id, &g);
            }
            grads[id] = Some(g);
        }
        Ok(visited)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("gradient shape matches its value")
}

fn backprop(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: &Tensor) {
    let out = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, like(av, gemm(gd, false, bv.data(), true, m, n, k)));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, like(bv, gemm(av.data(), true, gd, false, k, m, n)));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let ga = gd.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
            let gb = gd.iter().zip(av.data()).map(|(g, a)| g * a).collect();
            accumulate(nodes, grads, *a, like(av, ga));
            accumulate(nodes, grads, *b, like(bv, gb));
        }
        Op::AddBias(x, bias) => {
            accumulate(nodes, grads, *x, g.clone());
            if nodes[*bias].requires_grad {
                let cols = g.cols();
                let mut gb = vec![0.0; cols];
                for r in gd.chunks(cols) {
                    for (acc, v) in gb.iter_mut().zip(r) {
                        *acc += v;
                    }
                }
                accumulate(nodes, grads, *bias, like(&nodes[*bias].value, gb));
            }
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.map(|v| v * c)),
        Op::Tanh(x) => {
            let d = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(nodes, grads, *x, like(out, d));
        }
        Op::Relu(x) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, like(out, d));
        }
        Op::Sigmoid(x) => {
            let d = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            accumulate(nodes, grads, *x, like(out, d));
        }
        Op::Concat(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let c = pv.cols();
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(nodes, grads, p, like(pv, d));
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let n = pv.len();
                if nodes[p].requires_grad {
                    accumulate(nodes, grads, p, like(pv, gd[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::Softmax(x) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for ((dr, gr), yr) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = y * (g - dot);
                }
            }
            accumulate(nodes, grads, *x, like(out, d));
        }
        Op::LogSoftmax(x) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for ((dr, gr), yr) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                let gsum: f64 = gr.iter().sum();
                for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = g - y.exp() * gsum;
                }
            }
            accumulate(nodes, grads, *x, like(out, d));
        }
        Op::LogSumExp(x) => {
            let xv = &nodes[*x].value;
            let c = xv.cols();
            let mut d = vec![0.0; xv.len()];
            for (r, (dr, xr)) in d.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                let lse = out.data()[r];
                for (o, xi) in dr.iter_mut().zip(xr) {
                    *o = gd[r] * (xi - lse).exp();
                }
            }
            accumulate(nodes, grads, *x, like(xv, d));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = out.cols();
            let gv = nodes[*gamma].value.data();
            if nodes[*x].requires_grad {
                let n = c as f64;
                let mut d = vec![0.0; out.len()];
                for (r, dr) in d.chunks_mut(c).enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let dh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for ((o, dhi), hi) in dr.iter_mut().zip(&dh).zip(hr) {
                        *o = inv_std[r] / n * (n * dhi - sum_dh - hi * sum_dh_h);
                    }
                }
                accumulate(nodes, grads, *x, like(out, d));
            }
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dg[j] += gr[j] * hr[j];
                    db[j] += gr[j];
                }
            }
            accumulate(nodes, grads, *gamma, like(&nodes[*gamma].value, dg));
            accumulate(nodes, grads, *beta, like(&nodes[*beta].value, db));
        }
        Op::SliceCols { x, start } => {
            let xv = &nodes[*x].value;
            let (xc, c) = (xv.cols(), out.cols());
            let mut d = vec![0.0; xv.len()];
            for (r, gr) in gd.chunks(c).enumerate() {
                d[r * xc + start..r * xc + start + c].copy_from_slice(gr);
            }
            accumulate(nodes, grads, *x, like(xv, d));
        }
        Op::SliceRows { x, start } => {
            let xv = &nodes[*x].value;
            let c = xv.cols();
            let mut d = vec![0.0; xv.len()];
            d[start * c..start * c + gd.len()].copy_from_slice(gd);
            accumulate(nodes, grads, *x, like(xv, d));
        }
        Op::GatherRows { table, ids } => {
            let tv = &nodes[*table].value;
            let c = tv.cols();
            let mut d = vec![0.0; tv.len()];
            for (gr, &i) in gd.chunks(c).zip(ids) {
                for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(gr) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *table, like(tv, d));
        }
        Op::Transpose(x) => {
            let xv = &nodes[*x].value;
            let d = transpose_raw(gd, out.rows(), out.cols());
            accumulate(nodes, grads, *x, like(xv, d));
        }
        Op::Sum(x) => {
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, Tensor::full(xv.shape(), gd[0]));
        }
        Op::Reshape(x) => {
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, like(xv, gd.to_vec()));
        }
        Op::ScalarVjp { input, grad } => {
            let xv = &nodes[*input].value;
            let d = grad.iter().map(|v| v * gd[0]).collect();
            accumulate(nodes, grads, *input, like(xv, d));
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn emit(&self, value: Tensor, inputs: &[Var<'t>], op: Op) -> Var<'t> {
        let rg = inputs.iter().any(|v| v.requires_grad());
        self.tape.push(Arc::new(value), rg, op)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        self.emit(v, &[*self], op)
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(shape_err("matmul", &a, &b));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let out = Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n))?;
        Ok(self.emit(out, &[*self, rhs], Op::MatMul(self.id, rhs.id)))
    }

    fn zip_same(&self, rhs: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, &a, &b));
        }
        let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), d)
    }

    /// Elementwise sum. A rank-1 `rhs` whose length equals the last extent
    /// of `self` is broadcast over the leading axis (bias add); every other
    /// mismatch is an error.
    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() == b.shape() {
            let out = self.zip_same(rhs, "add", |x, y| x + y)?;
            return Ok(self.emit(out, &[*self, rhs], Op::Add(self.id, rhs.id)));
        }
        if b.shape().len() == 1 && a.shape().len() >= 2 && b.len() == a.cols() {
            let c = a.cols();
            let d = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.data()[i % c])
                .collect();
            let out = Tensor::new(a.shape().to_vec(), d)?;
            return Ok(self.emit(out, &[*self, rhs], Op::AddBias(self.id, rhs.id)));
        }
        Err(shape_err("add", &a, &b))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_same(rhs, "sub", |x, y| x - y)?;
        Ok(self.emit(out, &[*self, rhs], Op::Sub(self.id, rhs.id)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_same(rhs, "mul", |x, y| x * y)?;
        Ok(self.emit(out, &[*self, rhs], Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(self.id))
    }

    /// Concatenates along the last axis; all parts must share row count.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| contract("concat of zero parts"))?;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        for v in &values[1..] {
            if v.rows() != rows || v.shape().len() != values[0].shape().len() {
                return Err(shape_err("concat", &values[0], v));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = values[0].shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = total;
        let out = Tensor::new(shape, data)?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(out, parts, Op::Concat(ids)))
    }

    /// Stacks rank-2 parts with equal column count on top of each other.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| contract("concat_rows of zero parts"))?;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let cols = values[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.cols() != cols || v.shape().len() != 2 {
                return Err(shape_err("concat_rows", &values[0], v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(out, parts, Op::ConcatRows(ids)))
    }

    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        require_finite("softmax", &x)?;
        let c = x.cols();
        let mut d = vec![0.0; x.len()];
        for (o, r) in d.chunks_mut(c).zip(x.data().chunks(c)) {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (oi, ri) in o.iter_mut().zip(r) {
                *oi = (ri - m).exp();
                s += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= s;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), d)?;
        Ok(self.emit(out, &[*self], Op::Softmax(self.id)))
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        require_finite("log_softmax", &x)?;
        let c = x.cols();
        let mut d = vec![0.0; x.len()];
        for (o, r) in d.chunks_mut(c).zip(x.data().chunks(c)) {
            let lse = crate::tensor::log_sum_exp(r);
            for (oi, ri) in o.iter_mut().zip(r) {
                *oi = ri - lse;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), d)?;
        Ok(self.emit(out, &[*self], Op::LogSoftmax(self.id)))
    }

    /// Reduces the last axis; the output drops that axis.
    pub fn logsumexp(&self) -> Result<Var<'t>> {
        let x = self.value();
        require_finite("logsumexp", &x)?;
        let c = x.cols();
        let d: Vec<f64> = x.data().chunks(c).map(crate::tensor::log_sum_exp).collect();
        let shape = x.shape()[..x.shape().len().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, d)?;
        Ok(self.emit(out, &[*self], Op::LogSumExp(self.id)))
    }

    /// Row-wise normalization to zero mean and unit variance, followed by a
    /// learnable per-column scale and shift.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let c = x.cols();
        if g.shape() != [c] || b.shape() != [c] {
            return Err(shape_err("layer_norm", &x, &g));
        }
        let n = c as f64;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut d = vec![0.0; x.len()];
        for (r, row) in x.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                d[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), d)?;
        Ok(self.emit(
            out,
            &[*self, gamma, beta],
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.cols();
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut d = Vec::with_capacity(x.rows() * len);
        for r in x.data().chunks(c) {
            d.extend_from_slice(&r[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let out = Tensor::new(shape, d)?;
        Ok(self.emit(out, &[*self], Op::SliceCols { x: self.id, start }))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 || len == 0 || start + len > x.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = x.cols();
        let out = Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.emit(out, &[*self], Op::SliceRows { x: self.id, start }))
    }

    /// Embedding lookup: row `ids[i]` of a rank-2 table becomes output row `i`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        if t.shape().len() != 2 {
            return Err(contract("gather_rows expects a rank-2 table"));
        }
        if ids.is_empty() {
            return Err(contract("gather_rows with no ids"));
        }
        let c = t.cols();
        let mut d = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= t.rows() {
                return Err(Error::Lookup { id: i, size: t.rows() });
            }
            d.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(ids.len(), c, d)?;
        Ok(self.emit(
            out,
            &[*self],
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(contract("transpose expects rank 2"));
        }
        let (m, n) = (x.rows(), x.cols());
        let out = Tensor::matrix(n, m, transpose_raw(x.data(), m, n))?;
        Ok(self.emit(out, &[*self], Op::Transpose(self.id)))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.emit(Tensor::scalar(s), &[*self], Op::Sum(self.id))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.emit(out, &[*self], Op::Reshape(self.id)))
    }

    /// Records a scalar `value` computed outside the primitive set whose
    /// gradient with respect to `self` is `grad` (same length as `self`).
    pub fn scalar_with_grad(&self, value: f64, grad: Vec<f64>) -> Result<Var<'t>> {
        if grad.len() != self.value().len() {
            return Err(contract("scalar_with_grad: gradient length mismatch"));
        }
        Ok(self.emit(
            Tensor::scalar(value),
            &[*self],
            Op::ScalarVjp {
                input: self.id,
                grad,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(a.matmul(i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        for v in x.softmax().unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logsumexp_closed_form() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2f64.ln(), 3f64.ln()]));
        let y = x.logsumexp().unwrap().value();
        assert!(y.shape().is_empty());
        assert!((y.item() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(a.add(c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn non_finite_softmax_input_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(x.softmax(), Err(Error::NonFinite { .. })));
        assert!(matches!(x.log_softmax(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = x.tanh();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 1.0);
    }

    #[test]
    fn logsumexp_grad_is_softmax() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]), true);
        let y = x.logsumexp().unwrap();
        tape.backward(y).unwrap();
        let sm = x.softmax().unwrap().value();
        assert!(x.grad().unwrap().max_abs_diff(&sm) < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x.tanh()), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, 0.1]), true);
        let a = x.tanh();
        let b = a.sigmoid();
        let c = b.mul(a).unwrap().sum();
        let order = tape.backward(c).unwrap();
        assert_eq!(order, vec![c.id(), c.id() - 1, b.id(), a.id()]);
        assert!(order.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5]), true);
        let y = x.add(x).unwrap().add(x).unwrap().sum();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0]);
    }

    #[test]
    fn constants_record_no_backward_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = a.tanh().sum();
        assert!(!b.requires_grad());
        assert!(tape.backward(b).unwrap().is_empty());
    }

    #[test]
    fn reset_empties_the_tape() {
        let mut tape = Tape::new();
        {
            let x = tape.leaf(Tensor::vector(vec![1.0]), true);
            let _ = x.tanh();
        }
        assert_eq!(tape.len(), 2);
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let tape = Tape::new();
        let x = tape.constant(m(2, 4, &[1.0, 2.0, 3.0, 10.0, -3.0, 0.5, 0.25, 8.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = x.layer_norm(g, b).unwrap().value();
        for r in 0..2 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.gather_rows(&[3]), Err(Error::Lookup { id: 3, size: 3 })));
    }

    #[test]
    fn bias_broadcast_only_over_leading_axis() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(x.add(b).unwrap().value().row(1), &[1.0, 2.0, 3.0]);
        let wrong = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(x.add(wrong).is_err());
    }
}
