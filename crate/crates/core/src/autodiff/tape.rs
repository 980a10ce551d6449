//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to compute the vector-Jacobian product. Nodes are appended in
//! evaluation order, so the list is already topologically sorted and
//! `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{self, Lanes, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sigmoid(Var),
    Reciprocal(Var),
    ClampMin(Var, f64),
    Softmax(Var, Lanes),
    MaskedSoftmax(Var, Lanes),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    LogSumExp(Var),
    L1Loss(Var, Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CosineSim {
        u: Var,
        v: Var,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph. One tape per forward pass; a tape is not
/// meant to be shared between threads while it is being built.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not require
    /// gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        tensor::matmul_bt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a row vector (length = column count) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, cols) = ta.rows_cols();
        if tr.numel() != cols {
            return Err(shape_err("add_row", ta, tr));
        }
        let r = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % cols])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(shape_err("mul_scalar", self.value(a), ts));
        }
        let c = ts.item();
        let out = self.map(a, |x| x * c);
        Ok(self.push(out, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, tensor::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, tensor::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::recip);
        self.push(out, Op::Reciprocal(a), &[a])
    }

    /// `max(a, floor)`; entries at or below the floor pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.map(a, |x| x.max(floor));
        self.push(out, Op::ClampMin(a, floor), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax(axis)?;
        let lanes = Lanes::new(out.shape(), axis)?;
        Ok(self.push(out, Op::Softmax(a, lanes), &[a]))
    }

    /// Softmax over the kept entries of each slice along `axis`. Dropped
    /// entries are exactly zero and receive no gradient.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool], axis: usize) -> Result<Var> {
        let out = self.value(a).masked_softmax(keep, axis)?;
        let lanes = Lanes::new(out.shape(), axis)?;
        Ok(self.push(out, Op::MaskedSoftmax(a, lanes), &[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != cols || tb.numel() != cols {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::InvalidShape {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?);
        let cols = first.rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.rows_cols();
            if c != cols {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new([rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::InvalidShape {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?);
        let rows = first.rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.rows_cols();
            if r != rows {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * cols + off..r * cols + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new([rows, cols], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols();
        if len == 0 || start + len > rows {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {rows}", start + len),
            });
        }
        let out = Tensor::new(
            [len, cols],
            t.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols();
        if len == 0 || start + len > cols {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {cols}", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new([rows, len], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Column means: `[rows × cols] → [1 × cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            add_into(&mut out, &t.data()[r * cols..(r + 1) * cols]);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let out = Tensor::new([1, cols], out).unwrap();
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Picks flat-indexed entries into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if indices.is_empty() || indices.iter().any(|&i| i >= t.numel()) {
            return Err(Error::InvalidShape {
                op: "gather",
                msg: format!("indices {indices:?} invalid for {} entries", t.numel()),
            });
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// `log Σ exp(a)` over all entries, computed with max subtraction.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = m + d.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        self.push(Tensor::scalar(s), Op::LogSumExp(a), &[a])
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.numel() != tt.numel() {
            return Err(shape_err("l1_loss", tp, tt));
        }
        let s = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>();
        let v = s / tp.numel() as f64;
        Ok(self.push(Tensor::scalar(v), Op::L1Loss(pred, target), &[pred, target]))
    }

    /// Scales each row to unit length; norms below `eps` are floored to it.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut norms = Vec::with_capacity(rows);
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let n = tensor::norm(&t.data()[r * cols..(r + 1) * cols]).max(eps);
            norms.push(n);
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v /= n);
        }
        let out = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// `u·v / (max(‖u‖,ε)·max(‖v‖,ε))`, the zero-safe similarity used in training.
    pub fn cosine_sim(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.numel() != tv.numel() {
            return Err(shape_err("cosine_sim", tu, tv));
        }
        let nu = tensor::norm(tu.data()).max(eps);
        let nv = tensor::norm(tv.data()).max(eps);
        let s = tensor::dot(tu.data(), tv.data()) / (nu * nv);
        Ok(self.push(Tensor::scalar(s), Op::CosineSim { u, v, eps }, &[u, v]))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", lt.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Hands back the accumulation buffer for `v`, or None when `v` takes
        // no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = acc!(*a) {
                    tensor::matmul_bt_into(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = acc!(*b) {
                    tensor::matmul_at_into(ta.data(), g, db, k, m, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if let Some(da) = acc!(*a) {
                    tensor::matmul_into(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = acc!(*b) {
                    tensor::matmul_at_into(g, ta.data(), db, n, m, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                if let Some(da) = acc!(*a) {
                    add_into(da, &tensor::transpose(g, r, c));
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = acc!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * tb[i];
                    }
                }
                if let Some(db) = acc!(*b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * ta[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                let cols = out.rows_cols().1;
                if let Some(dr) = acc!(*row) {
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % cols] += gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item();
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
                let ta = self.value(*a).data();
                if let Some(ds) = acc!(*s) {
                    ds[0] += tensor::dot(g, ta);
                }
            }
            Op::Exp(a) => {
                if let Some(da) = acc!(*a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * out.data()[i];
                    }
                }
            }
            Op::Log(a) => {
                let ta = self.value(*a).data();
                if let Some(da) = acc!(*a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] / ta[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a).data();
                if let Some(da) = acc!(*a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * tensor::gelu_grad(ta[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = acc!(*a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        let y = out.data()[i];
                        *d += g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Reciprocal(a) => {
                if let Some(da) = acc!(*a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        let y = out.data()[i];
                        *d -= g[i] * y * y;
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let ta = self.value(*a).data();
                if let Some(da) = acc!(*a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        if ta[i] > *floor {
                            *d += g[i];
                        }
                    }
                }
            }
            Op::Softmax(a, lanes) | Op::MaskedSoftmax(a, lanes) => {
                if let Some(da) = acc!(*a) {
                    lanes.for_each(|idx| tensor::softmax_lane_backward(out.data(), g, da, idx));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = out.rows_cols();
                let tg = self.value(*gamma).data();
                if let Some(dg) = acc!(*gamma) {
                    for (i, gv) in g.iter().enumerate() {
                        dg[i % cols] += gv * xhat[i];
                    }
                }
                if let Some(db) = acc!(*beta) {
                    for (i, gv) in g.iter().enumerate() {
                        db[i % cols] += gv;
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let n = cols as f64;
                    for (r, &rs) in rstd.iter().enumerate().take(rows) {
                        let base = r * cols;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            let gh = g[base + c] * tg[c];
                            s1 += gh;
                            s2 += gh * xhat[base + c];
                        }
                        for c in 0..cols {
                            let gh = g[base + c] * tg[c];
                            dx[base + c] += rs * (gh - s1 / n - xhat[base + c] * s2 / n);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = acc!(p) {
                        add_into(dp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = out.rows_cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).rows_cols().1;
                    if let Some(dp) = acc!(p) {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * cols + off..r * cols + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = out.rows_cols().1;
                if let Some(da) = acc!(*a) {
                    add_into(&mut da[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, w) = out.rows_cols();
                let cols = self.value(*a).rows_cols().1;
                if let Some(da) = acc!(*a) {
                    for r in 0..rows {
                        add_into(
                            &mut da[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = acc!(*a) {
                    let c = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).rows_cols();
                if let Some(da) = acc!(*a) {
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                }
            }
            Op::Gather(a, indices) => {
                if let Some(da) = acc!(*a) {
                    for (gv, &i) in g.iter().zip(indices) {
                        da[i] += gv;
                    }
                }
            }
            Op::LogSumExp(a) => {
                let lse = out.item();
                let ta = self.value(*a).data();
                if let Some(da) = acc!(*a) {
                    for (d, x) in da.iter_mut().zip(ta) {
                        *d += g[0] * (x - lse).exp();
                    }
                }
            }
            Op::L1Loss(p, t) => {
                let (tp, tt) = (self.value(*p).data(), self.value(*t).data());
                let c = g[0] / tp.len() as f64;
                let sign = |i: usize| {
                    let d = tp[i] - tt[i];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(dp) = acc!(*p) {
                    for (i, d) in dp.iter_mut().enumerate() {
                        *d += c * sign(i);
                    }
                }
                if let Some(dt) = acc!(*t) {
                    for (i, d) in dt.iter_mut().enumerate() {
                        *d -= c * sign(i);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let (rows, cols) = out.rows_cols();
                let tx = self.value(*x).data();
                if let Some(dx) = acc!(*x) {
                    for (r, &n) in norms.iter().enumerate().take(rows) {
                        let base = r * cols;
                        let xr = &tx[base..base + cols];
                        let gr = &g[base..base + cols];
                        let l2 = tensor::norm(xr);
                        // y = x / max(‖x‖, ε); the floor branch is linear
                        let gx = tensor::dot(gr, xr);
                        for c in 0..cols {
                            let mut d = gr[c] / n;
                            if l2 > 0.0 && n == l2 {
                                d -= gx * xr[c] / (n * n * l2);
                            }
                            dx[base + c] += d;
                        }
                    }
                }
            }
            Op::CosineSim { u, v, eps } => {
                let (tu, tv) = (self.value(*u).data(), self.value(*v).data());
                let (lu, lv) = (tensor::norm(tu), tensor::norm(tv));
                let (nu, nv) = (lu.max(*eps), lv.max(*eps));
                let s = out.item();
                if let Some(du) = acc!(*u) {
                    for i in 0..tu.len() {
                        let mut gi = tv[i] / (nu * nv);
                        if lu > *eps {
                            gi -= s * tu[i] / (nu * lu);
                        }
                        du[i] += g[0] * gi;
                    }
                }
                if let Some(dv) = acc!(*v) {
                    for i in 0..tv.len() {
                        let mut gi = tu[i] / (nu * nv);
                        if lv > *eps {
                            gi -= s * tv[i] / (nv * lv);
                        }
                        dv[i] += g[0] * gi;
                    }
                }
            }
        }
    }
}
