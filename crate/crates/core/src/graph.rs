//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation in creation order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse. Parameters are borrowed, not copied; their gradients come back
//! keyed by [`ParamKey`] and the caller hands them to the optimizer after
//! the graph is dropped.

use std::collections::BTreeMap;
use std::ops::Deref;

use rand::Rng;

use crate::error::{MeltError, Result};
use crate::params::{Grads, ParamKey};
use crate::tensor::{
    gelu, gelu_grad, matmul_into, matmul_nt_into, matmul_tn_into, mean_of_rows, sigmoid,
    softmax_in_place, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Value<'p, T> {
    Borrowed(&'p Tensor<T>),
    Owned(Tensor<T>),
}

impl<T> Deref for Value<'_, T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamKey>,
}

pub struct Graph<'p, T> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> MeltError {
    MeltError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf. Gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed parameter leaf; its gradient is returned under `key`.
    pub fn param(&mut self, key: ParamKey, value: &'p Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad: trainable,
            param: Some(key),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() || x.cols() != y.cols() {
            return Err(shape_err(op, x.shape(), y.shape()));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Broadcast-add a `1 × n` row (or length-`n` vector) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.len() != x.cols() {
            return Err(shape_err("add_row", x.shape(), r.shape()));
        }
        let c = x.cols();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, &b) in chunk.iter_mut().zip(r.data()) {
                *d += b;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax. Columns whose `allow` flag is false receive a −∞
    /// score, i.e. probability zero.
    pub fn softmax_rows(&mut self, a: Var, allow: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if let Some(m) = allow {
            if m.len() != c {
                return Err(shape_err("softmax mask", x.shape(), &[m.len()]));
            }
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row, allow);
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Softmax along `axis` of a matrix (0 = columns, 1 = rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis == 0 {
            let t = self.transpose(a);
            let s = self.softmax_rows(t, None)?;
            Ok(self.transpose(s))
        } else {
            self.softmax_rows(a, None)
        }
    }

    /// Per-row layer normalization with affine `gamma`/`beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if g.len() != c || b.len() != c {
            return Err(shape_err("layer_norm", xv.shape(), g.shape()));
        }
        let rows = xv.rows();
        let n = T::c(c as f64);
        let mut xhat = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = g.data()[j] * h + b.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", x.shape(), &[start, len]));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let t = Tensor::matrix(rows, len, data)?;
        Ok(self.push(t, Op::SliceCols { x: a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(MeltError::Empty("concat_cols"));
        };
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(MeltError::Empty("concat_rows"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        if idx.is_empty() {
            return Err(MeltError::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(shape_err("gather_rows", x.shape(), &[i]));
            }
            data.extend_from_slice(x.row_slice(i));
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Mean over rows, giving a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let m = mean_of_rows((0..x.rows()).map(|r| x.row_slice(r)), c).expect("at least one row");
        self.push(Tensor::row(m), Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::c(p.len() as f64);
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), &[pred, target]))
    }

    /// Mean softmax cross-entropy over rows of `logits` (one label per row).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (rows, c) = (x.rows(), x.cols());
        if labels.len() != rows {
            return Err(shape_err("cross_entropy", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(MeltError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut probs = x.data().to_vec();
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = x.row_slice(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[label];
            softmax_in_place(&mut probs[r * c..(r + 1) * c], None);
        }
        let loss = loss / T::c(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1−p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let x = self.value(a);
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = Tensor::new(x.shape().to_vec(), mask)?;
        let m = self.constant(m);
        self.mul(a, m)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(MeltError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        let mut leaves = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            let t = Tensor::new(shape, data)?;
            match node.param {
                Some(key) => {
                    params
                        .entry(key)
                        .and_modify(|acc: &mut Tensor<T>| {
                            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        })
                        .or_insert(t);
                }
                None => {
                    leaves.insert(Var(i), t);
                }
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn backprop_node(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    acc(*a, &mut |da| matmul_nt_into(g, bv.data(), da, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |db| matmul_tn_into(av.data(), g, db, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if wants(*a) {
                    acc(*a, &mut |da| matmul_into(g, bv.data(), da, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |db| matmul_tn_into(g, av.data(), db, m, n, k));
                }
            }
            Op::Transpose(a) => {
                let out = &node.value;
                let (r, c) = (out.rows(), out.cols());
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |da| add_into(da, g));
                let c = val(*r).len();
                acc(*r, &mut |dr| {
                    for chunk in g.chunks(c) {
                        add_into(dr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv.data()) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av.data()) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |da| {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x * *s;
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(av.data()) {
                        *d += x * gelu_grad(v);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |da| {
                    for ((d, &x), &s) in da.iter_mut().zip(g).zip(y.data()) {
                        *d += x * s * (T::one() - s);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum();
                        for ((d, &gy), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yy * (gy - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let c = gv.len();
                let n = T::c(c as f64);
                acc(*gamma, &mut |dg| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &gy), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gy * h;
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks(c) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    for (r, (drow, (grow, hrow))) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c).zip(xhat.chunks(c)))
                        .enumerate()
                    {
                        let dh: Vec<T> = grow.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for j in 0..c {
                            drow[j] += k * (n * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c_in = val(*x).cols();
                let c_out = node.value.cols();
                acc(*x, &mut |dx| {
                    for (r, grow) in g.chunks(c_out).enumerate() {
                        add_into(&mut dx[r * c_in + start..r * c_in + start + c_out], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).cols();
                    acc(*p, &mut |dp| {
                        for (r, drow) in dp.chunks_mut(c).enumerate() {
                            add_into(drow, &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                acc(*x, &mut |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let xv = val(*a);
                let inv = T::one() / T::c(xv.rows() as f64);
                acc(*a, &mut |da| {
                    for drow in da.chunks_mut(g.len()) {
                        for (d, &x) in drow.iter_mut().zip(g) {
                            *d += x * inv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let k = g[0] * T::c(2.0) / T::c(pv.len() as f64);
                acc(*p, &mut |dp| {
                    for ((d, &a), &b) in dp.iter_mut().zip(pv.data()).zip(tv.data()) {
                        *d += k * (a - b);
                    }
                });
                acc(*t, &mut |dt| {
                    for ((d, &a), &b) in dt.iter_mut().zip(pv.data()).zip(tv.data()) {
                        *d -= k * (a - b);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols();
                let k = g[0] / T::c(labels.len() as f64);
                acc(*logits, &mut |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            dl[r * c + j] += k * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    params: Grads<T>,
    leaves: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of an owned `requires_grad` leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// Gradients of every bound trainable parameter; unreachable ones are
    /// zero-filled.
    pub fn params(&self) -> &Grads<T> {
        &self.params
    }

    pub fn into_params(self) -> Grads<T> {
        self.params
    }
}
