//! Measurement instruments: mutual-KNN alignment between representation
//! sets (and layer-by-layer heatmaps), linear-probe regression onto
//! standardized LM layer targets, and ACTV activation dumps.

mod actv;
mod knn;
mod probe;

pub use actv::{decode_activations, encode_activations, load_activations, save_activations, ACTV_MAGIC, ACTV_VERSION};
pub use knn::{
    alignment_heatmap, knn_indices, layer_set, layer_sets, mutual_knn_alignment, Aggregate, AlignmentHeatmap, Metric,
    DEFAULT_K,
};
pub use probe::{
    layer_target_sweep, probe_regress, standardize_targets, ProbeEntry, ProbeOptions, ProbeReport, StandardizeStats,
    VARIANCE_FLOOR,
};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `n_samples` points of width `dim` (row-major, f64) with a free-text label.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSet {
    n: usize,
    dim: usize,
    data: Vec<f64>,
    pub label: String,
}

impl RepresentationSet {
    pub fn new(n: usize, dim: usize, data: Vec<f64>, label: &str) -> Result<Self> {
        if n < 2 {
            return Err(Error::contract(format!("representation set {label:?} needs at least 2 samples, got {n}")));
        }
        if data.len() != n * dim {
            return Err(Error::shape(format!("{} values for {n} x {dim}", data.len())));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in row {} of {label:?}", i / dim.max(1))));
        }
        Ok(Self { n, dim, data, label: label.to_string() })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, label: &str) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape(format!("points must be [n, dim], got {:?}", t.shape())));
        }
        Self::new(t.rows(), t.cols(), t.data().iter().map(|x| x.f64()).collect(), label)
    }

    pub fn from_rows(rows: &[Vec<f64>], label: &str) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), dim, rows.concat(), label)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn points(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.n, self.dim], self.data.clone()).expect("consistent shape")
    }
}
