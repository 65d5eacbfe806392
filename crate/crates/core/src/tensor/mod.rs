//! Dense row-major tensors, reverse-mode autodiff ([`Graph`]), finite-difference
//! gradient verification and the TNSR binary format.

mod gradcheck;
mod graph;
pub(crate) mod io;
pub mod kernels;
mod scalar;

use std::sync::Arc;

pub use gradcheck::{grad_check, grad_check_store, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Mask, Var};
pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TNSR_MAGIC, TNSR_VERSION};
pub use scalar::{DType, Scalar};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

/// Initial contents for [`Tensor::new`].
pub enum Init<'a, T> {
    Zeros,
    Ones,
    Normal { mean: f64, std: f64, rng: &'a mut Rng },
    Values(Vec<T>),
}

/// Dense row-major tensor. Values are shared copy-on-write, so cloning is cheap
/// and a parameter bound into a [`Graph`] is not copied.
#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Creates a tensor with every dimension at least 1.
    pub fn new(shape: &[usize], init: Init<'_, T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("shape {shape:?} must be non-empty with all dims >= 1")));
        }
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal { mean, std, rng } => (0..n).map(|_| T::of(rng.normal(mean, std))).collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::shape(format!("shape {shape:?} needs {n} values, got {}", v.len())));
                }
                v
            }
        };
        Ok(Self::raw(shape.to_vec(), data))
    }

    /// Builds a tensor from values; zero-sized dims are allowed (e.g. `[0, d]`).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!("shape {shape:?} holds {} values, got {}", numel(shape), data.len())));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data: Arc::new(data), requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![T::zero(); numel(shape)])
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor (last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.len() {
            return Err(Error::shape(format!("gradient of {} values for tensor of {}", g.len(), self.len())));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data), requires_grad: false, grad: None })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of(v.f64())).collect()),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-for-bit equality of shape and values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }

    fn expect_rank2(&self, what: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(format!("{what} expects rank 2, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.expect_rank2("matmul")?;
        let (k2, n) = other.expect_rank2("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims differ: {:?} x {:?}", self.shape, other.shape)));
        }
        Ok(Self::raw(vec![m, n], kernels::matmul(&self.data, &other.data, m, k, n)))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_rank2("transpose")?;
        Ok(Self::raw(vec![c, r], kernels::transpose(&self.data, r, c)))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", self.shape)));
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        Ok(Self::raw(self.shape.clone(), kernels::softmax_strided(&self.data, outer, len, inner)))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: f64) -> Result<Self> {
        let cols = self.cols();
        if gain.len() != cols || bias.len() != cols {
            return Err(Error::shape(format!(
                "layer_norm gain/bias lengths {}/{} != feature dim {cols}",
                gain.len(),
                bias.len()
            )));
        }
        let rows = self.len() / cols.max(1);
        let (xhat, _) = kernels::layer_norm_rows(&self.data, rows, cols, eps);
        let out = xhat
            .chunks(cols.max(1))
            .flat_map(|r| r.iter().zip(gain.data.iter().zip(bias.data.iter())).map(|(&x, (&g, &b))| x * g + b))
            .collect();
        Ok(Self::raw(self.shape.clone(), out))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map(|p| p.cols()).ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.expect_rank2("concat_rows")?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows column mismatch {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        Ok(Self::raw(vec![rows, cols], data))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.expect_rank2("slice_rows")?;
        if start + len > r {
            return Err(Error::shape(format!("rows {start}..{} of {r}", start + len)));
        }
        Ok(Self::raw(vec![len, c], self.data[start * c..(start + len) * c].to_vec()))
    }

    /// Mean over rows of a rank-2 tensor, as a `[1, cols]` tensor.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.expect_rank2("mean_rows")?;
        if r == 0 {
            return Err(Error::shape("mean of zero rows"));
        }
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o = *o + v;
            }
        }
        let n = T::of(r as f64);
        out.iter_mut().for_each(|v| *v = *v / n);
        Ok(Self::raw(vec![1, c], out))
    }

    /// Appends shape and little-endian value bytes, for fingerprinting.
    pub fn hash_bytes(&self, out: &mut Vec<u8>) {
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in self.data.iter() {
            v.write_le(out);
        }
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
