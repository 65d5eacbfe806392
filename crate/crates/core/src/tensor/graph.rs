//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so [`Graph::backward`] is a single reverse
//! sweep. Leaves either own a tensor or share one with a
//! [`ParamStore`](crate::params::ParamStore); frozen stores bind as leaves that
//! never require gradients, so no gradient is ever produced for them.

use std::collections::HashMap;
use std::sync::Arc;

use super::{kernels, numel, split_axis, Scalar, Tensor, LN_EPS};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask of shape `[rows, cols]`; `true` means "may attend".
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Arc<Vec<bool>>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols.max(1), i % cols.max(1))).collect();
        Self { rows, cols, allowed: Arc::new(allowed) }
    }

    /// Lower-triangular mask: row `i` attends to columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | Mse(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Scale(a, _) | Gelu(a) | MaskedSoftmax(a) | Sum(a) | Mean(a) => vec![*a],
            Softmax { x, .. } | SliceRows { x, .. } | SliceCols { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph over tensors of element type `T`.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    bound: HashMap<(u64, usize), Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("{what} expects rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: HashMap::new(), bound: HashMap::new(), grad_enabled: true }
    }

    /// A graph in which no node requires gradients (inference).
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.grad_enabled && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it requires gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds a stored parameter as a leaf, once per graph. Parameters of frozen
    /// stores never require gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let t = store.get(id).clone().with_requires_grad(!store.is_frozen());
        let v = self.leaf(t);
        self.bound.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients for every parameter of `store` bound in this graph, indexed
    /// by parameter id.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
        let mut out = vec![None; store.len()];
        for (&(uid, idx), v) in &self.bound {
            if uid == store.uid() {
                out[idx] = self.grad(*v).map(|g| g.to_vec());
            }
        }
        out
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::raw(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `[n]` (or `[1, n]`) row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).len() != n {
            return Err(Error::shape(format!("add_row: row of {} for width {n}", self.value(row).len())));
        }
        let xv = self.value(x);
        let rv = self.value(row).data();
        let data = xv.data().chunks(n.max(1)).flat_map(|r| r.iter().zip(rv).map(|(&a, &b)| a + b)).collect();
        let out = Tensor::raw(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let xv = self.value(x);
        let out = Tensor::raw(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect());
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::raw(xv.shape().to_vec(), xv.data().iter().map(|&v| kernels::gelu(v)).collect());
        self.push(out, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }))
    }

    /// Row softmax of a `[rows, cols]` score matrix with masked positions set
    /// to exactly zero. A fully masked row is a contract error.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let (rows, cols) = rank2(self.value(x), "masked_softmax")?;
        if let Some(m) = mask {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::shape(format!("mask [{}, {}] for scores [{rows}, {cols}]", m.rows(), m.cols())));
            }
        }
        let data = kernels::masked_softmax_rows(self.value(x).data(), mask.map(|m| m.as_slice()), rows, cols)
            .map_err(|r| Error::contract(format!("attention row {r} has every position masked")))?;
        let out = Tensor::raw(vec![rows, cols], data);
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// Layer normalization over the last dimension with eps = [`LN_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape(format!(
                "layer_norm gain/bias lengths {}/{} != feature dim {cols}",
                self.value(gain).len(),
                self.value(bias).len()
            )));
        }
        let rows = xv.len() / cols.max(1);
        let (xhat, rstd) = kernels::layer_norm_rows(xv.data(), rows, cols, LN_EPS);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat
            .chunks(cols.max(1))
            .flat_map(|r| r.iter().zip(g.iter().zip(b)).map(|(&v, (&gg, &bb))| v * gg + bb))
            .collect();
        let out = Tensor::raw(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Stacks rank-2 values row-wise; zero-row parts are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let rows = rank2(self.value(first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rank2(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols row mismatch {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::raw(vec![rows, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rank2(self.value(x), "slice_cols")?;
        if start + len > cols {
            return Err(Error::shape(format!("cols {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let out = Tensor::raw(vec![rows, len], data);
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rank2(self.value(table), "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!("id {bad} outside table of {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::raw(vec![ids.len(), d], data);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Mean token cross-entropy of `[n, vocab]` logits against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = rank2(self.value(logits), "cross_entropy")?;
        if n != targets.len() || n == 0 {
            return Err(Error::contract(format!(
                "cross_entropy needs one target per row and n > 0 (rows {n}, targets {})",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Vocab(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_strided(x, n, vocab, 1);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[t]);
        }
        loss = loss / T::of(n as f64);
        let out = Tensor::scalar(loss);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = self.value(x).data().iter().copied().sum::<T>() / T::of(n as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x)))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::contract("mse of empty tensors"));
        }
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>()
            / T::of(n as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b)))
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a single-element loss. Leaf gradients accumulate
    /// across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&i) {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g, bv.data(), &mut da, m, n, k);
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(av.data(), g, &mut db, m, k, n);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                add_into(&mut grads[a.0], &kernels::transpose(g, r, c));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<T> = g.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<T> = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.wants(*row) {
                    let n = self.value(*row).len();
                    let mut d = vec![T::zero(); n];
                    for r in g.chunks(n.max(1)) {
                        d.iter_mut().zip(r).for_each(|(a, &b)| *a = *a + b);
                    }
                    add_into(&mut grads[row.0], &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<T> = g.iter().map(|&v| v * *c).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Gelu(x) => {
                let d: Vec<T> =
                    g.iter().zip(self.value(*x).data()).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for q in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + q;
                        let dot = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..*len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::MaskedSoftmax(x) => {
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot = g[s.clone()].iter().zip(&y[s.clone()]).map(|(&a, &b)| a * b).sum::<T>();
                    for c in s {
                        d[c] = y[c] * (g[c] - dot);
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = out.cols();
                let rows = rstd.len();
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            dg[c] = dg[c] + g[k] * xhat[k];
                            db[c] = db[c] + g[k];
                        }
                    }
                    if self.wants(*gain) {
                        add_into(&mut grads[gain.0], &dg);
                    }
                    if self.wants(*bias) {
                        add_into(&mut grads[bias.0], &db);
                    }
                }
                if self.wants(*x) {
                    let n = T::of(cols as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let s = r * cols;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let dxh = g[s + c] * gv[c];
                            mean_d = mean_d + dxh;
                            mean_dx = mean_dx + dxh * xhat[s + c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for c in 0..cols {
                            let dxh = g[s + c] * gv[c];
                            dx[s + c] = rs * (dxh - mean_d - xhat[s + c] * mean_dx);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let cols = out.cols();
                    let mut d = vec![T::zero(); self.value(*x).len()];
                    d[start * cols..start * cols + g.len()].copy_from_slice(g);
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_into(&mut grads[p.0], &d);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let w = out.shape()[1];
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d_model = tv.shape()[1];
                let mut d = vec![T::zero(); tv.len()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut d[id * d_model..(id + 1) * d_model];
                    dst.iter_mut().zip(&g[i * d_model..(i + 1) * d_model]).for_each(|(a, &b)| *a = *a + b);
                }
                add_into(&mut grads[table.0], &d);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).shape()[1];
                let scale = g[0] / T::of(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * vocab + t] = d[i * vocab + t] - scale;
                }
                add_into(&mut grads[logits.0], &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / T::of(n as f64); n];
                add_into(&mut grads[x.0], &d);
            }
            Op::Mse(a, b) => {
                let n = T::of(self.value(*a).len() as f64);
                let two = T::of(2.0);
                let d: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| two * (x - y) * g[0] / n)
                    .collect();
                if self.wants(*a) {
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let neg: Vec<T> = d.iter().map(|&v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn var(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
        g.leaf(Tensor::new(shape, Init::Values(v.to_vec())).unwrap().with_requires_grad(true))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = var(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut g = Graph::new();
        let x = var(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let mut g: Graph<f64> = Graph::new();
        let s = var(&mut g, &[2, 3], &[5.0, 1.0, -2.0, 0.3, 9.0, 1.0]);
        let m = Mask::causal(3);
        let sub = Mask::from_fn(2, 3, |r, c| m.get(r, c));
        let p = g.masked_softmax(s, Some(&sub)).unwrap();
        let v = g.value(p).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_grad_graph_records_no_gradients() {
        let mut g: Graph<f64> = Graph::no_grad();
        let x = var(&mut g, &[2], &[1.0, 2.0]);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none());
    }
}
