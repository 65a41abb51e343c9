//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. Because a node can only reference nodes that already exist,
//! the node vector is a topological order and the backward pass is a single
//! reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::func::COSINE_EPS;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Transpose(Var),
    MeanGroups(Var, usize),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
    SquaredError(Var, Vec<f64>),
    CosineRows(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.same_shape(tb) {
            Ok(())
        } else {
            Err(shape_err(op, ta, tb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % n];
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Scales row `i` of an `m x n` matrix by entry `i` of an `m x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let n = ta.cols();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= tc.data()[i / n];
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(crate::func::sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Averages consecutive blocks of `group` rows: `(b*group) x n -> b x n`.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let ta = self.value(a);
        if group == 0 || ta.rows() % group != 0 {
            return Err(Error::contract(format!(
                "mean_groups: {} rows not divisible into groups of {group}",
                ta.rows()
            )));
        }
        let (b, n) = (ta.rows() / group, ta.cols());
        let mut out = vec![0.0; b * n];
        for (r, row) in ta.data().chunks(n).enumerate() {
            let o = &mut out[(r / group) * n..(r / group + 1) * n];
            for (x, &v) in o.iter_mut().zip(row) {
                *x += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(b, n, out), Op::MeanGroups(a, group), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Column `j` as an `m x 1` matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = self.value(a);
        if j >= ta.cols() {
            return Err(Error::contract(format!(
                "column {j} out of range for {:?}",
                ta.shape()
            )));
        }
        let data: Vec<f64> = (0..ta.rows()).map(|r| ta.get(r, j)).collect();
        let rows = ta.rows();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(rows, 1, data), Op::Column(a, j), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = ta.clone();
        for (src, dst) in ta.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Mean cross-entropy of row-wise softmax(logits) at the given labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if labels.len() != t.rows() {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                t.rows()
            )));
        }
        let c = t.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (row, &l) in t.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let loss = total / labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    /// Mean squared error between an `m x 1` prediction and `m` targets.
    pub fn squared_error(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.cols() != 1 || t.rows() != targets.len() {
            return Err(Error::contract(format!(
                "squared_error: prediction {:?} vs {} targets",
                t.shape(),
                targets.len()
            )));
        }
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError(pred, targets.to_vec()),
            rg,
        ))
    }

    /// Row-wise cosine similarity `m x n, m x n -> m x 1`. Rows where either
    /// norm is below [`COSINE_EPS`] yield 0 with zero gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .chunks(n)
            .zip(tb.data().chunks(n))
            .map(|(u, v)| crate::func::cosine_similarity(u, v).0)
            .collect();
        let rows = ta.rows();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(rows, 1, data), Op::CosineRows(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor::matrix(1, 1, vec![1.0]));

        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Only differentiable leaves are reported.
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &self.nodes[i];
                if n.requires_grad && matches!(n.op, Op::Leaf) {
                    Some(g.unwrap_or_else(|| n.value.map(|_| 0.0)))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.idx].requires_grad {
                return;
            }
            match &mut grads[v.idx] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.idx].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.idx].requires_grad {
                    acc(*a, g.matmul(&val(*b).transpose()).expect("matmul grad"));
                }
                if self.nodes[b.idx].requires_grad {
                    acc(*b, val(*a).transpose().matmul(g).expect("matmul grad"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let n = g.cols();
                let mut r = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (s, &v) in r.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                acc(*row, Tensor::matrix(1, n, r));
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(*a), val(*col));
                let n = ta.cols();
                let mut da = g.clone();
                for (i, v) in da.data_mut().iter_mut().enumerate() {
                    *v *= tc.data()[i / n];
                }
                acc(*a, da);
                let dc: Vec<f64> = g
                    .data()
                    .chunks(n)
                    .zip(ta.data().chunks(n))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                acc(*col, Tensor::matrix(tc.rows(), 1, dc));
            }
            Op::Affine(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::MeanGroups(a, group) => {
                let ta = val(*a);
                let n = ta.cols();
                let inv = 1.0 / *group as f64;
                let mut d = vec![0.0; ta.len()];
                for (r, row) in d.chunks_mut(n).enumerate() {
                    let src = g.row_slice(r / group);
                    for (x, &v) in row.iter_mut().zip(src) {
                        *x = v * inv;
                    }
                }
                acc(*a, Tensor::matrix(ta.rows(), n, d));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let rows = g.rows();
                for p in parts {
                    let w = val(*p).cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                    }
                    offset += w;
                    acc(*p, Tensor::matrix(rows, w, d));
                }
            }
            Op::Column(a, j) => {
                let ta = val(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    d.set(r, *j, g.data()[r]);
                }
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = y.clone();
                for ((dr, yr), gr) in d
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::CrossEntropy(logits, labels) => {
                let t = val(*logits);
                let c = t.cols();
                let scale = g.item() / labels.len() as f64;
                let mut d = t.clone();
                for ((dr, src), &l) in d.data_mut().chunks_mut(c).zip(t.data().chunks(c)).zip(labels)
                {
                    softmax_row(src, dr);
                    dr[l] -= 1.0;
                    dr.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, d);
            }
            Op::SquaredError(pred, targets) => {
                let t = val(*pred);
                let scale = 2.0 * g.item() / targets.len() as f64;
                let d: Vec<f64> = t
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(p, y)| scale * (p - y))
                    .collect();
                acc(*pred, Tensor::matrix(t.rows(), 1, d));
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = ta.cols();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for r in 0..ta.rows() {
                    let (u, v) = (ta.row_slice(r), tb.row_slice(r));
                    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if nu < COSINE_EPS || nv < COSINE_EPS {
                        continue;
                    }
                    let c = node.value.data()[r];
                    let gr = g.data()[r];
                    for k in 0..n {
                        da[r * n + k] = gr * (v[k] / (nu * nv) - c * u[k] / (nu * nu));
                        db[r * n + k] = gr * (u[k] / (nu * nv) - c * v[k] / (nv * nv));
                    }
                }
                acc(*a, Tensor::matrix(ta.rows(), n, da));
                acc(*b, Tensor::matrix(tb.rows(), n, db));
            }
            Op::Sum(a) => {
                let ta = val(*a);
                acc(*a, ta.map(|_| g.item()));
            }
            Op::Mean(a) => {
                let ta = val(*a);
                let v = g.item() / ta.len() as f64;
                acc(*a, ta.map(|_| v));
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient for `v`, or `None` if `v` is not a differentiable leaf of
    /// the tape the gradients were computed on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}
