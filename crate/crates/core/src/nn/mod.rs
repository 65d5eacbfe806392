//! Transformer building blocks: embeddings with sinusoidal positions,
//! multi-head (self/cross) attention, feed-forward, and pre-norm encoder,
//! decoder and causal (decoder-only) stacks with per-layer state capture.

mod layers;
mod stacks;

pub use layers::{Attention, FeedForward, LayerNorm, Linear, TokenEmbedding};
pub use stacks::{CausalInput, CausalLm, Decoder, DecoderLayer, EncoderLayer, EncoderStack, Injection};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0
            || self.num_heads == 0
            || self.ff_dim == 0
            || self.max_seq_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config(format!("block config has a zero field: {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Hidden states per layer for one input: entry 0 is the embedded input,
/// entry `j` the output of layer `j`.
#[derive(Clone, Debug)]
pub struct LayerStates<T: Scalar = f32> {
    pub per_layer: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerStates<T> {
    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.per_layer.len().saturating_sub(1)
    }

    pub fn layer(&self, j: usize) -> Result<&Tensor<T>> {
        self.per_layer
            .get(j)
            .ok_or_else(|| Error::Range(format!("layer {j} requested from {} captured states", self.per_layer.len())))
    }

    /// First row of layer `j` (aggregate token of a vision transformer).
    pub fn first_token(&self, j: usize) -> Result<Vec<T>> {
        let t = self.layer(j)?;
        if t.rows() == 0 {
            return Err(Error::shape("aggregate of empty sequence"));
        }
        Ok(t.row(0).to_vec())
    }

    /// Final row of layer `j` (aggregate token of a language model).
    pub fn last_token(&self, j: usize) -> Result<Vec<T>> {
        let t = self.layer(j)?;
        if t.rows() == 0 {
            return Err(Error::shape("aggregate of empty sequence"));
        }
        Ok(t.row(t.rows() - 1).to_vec())
    }
}

/// Sinusoidal encodings for arbitrary (possibly negative) positions:
/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal<T: Scalar>(positions: impl IntoIterator<Item = i64>, dim: usize) -> Tensor<T> {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in positions {
        rows += 1;
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data.push(T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(&[rows, dim], data).expect("consistent sinusoid shape")
}

/// Positions of an injected prefix of `m` rows: `-m..-1`.
pub fn prefix_positions(m: usize) -> impl Iterator<Item = i64> {
    (0..m as i64).map(move |i| i - m as i64)
}

/// Layer indices `{0, ⌈D/3⌉, ⌈2D/3⌉, D}` for a stack of depth `D`. Duplicates
/// (tiny depths) are removed.
pub fn sweep_layers(depth: usize) -> Vec<usize> {
    let mut v = vec![0, depth.div_ceil(3), (2 * depth).div_ceil(3), depth];
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_mapping() {
        assert_eq!(sweep_layers(24), vec![0, 8, 16, 24]);
        assert_eq!(sweep_layers(6), vec![0, 2, 4, 6]);
        assert_eq!(sweep_layers(4), vec![0, 2, 3, 4]);
    }

    #[test]
    fn config_validation() {
        let mut c =
            BlockConfig { model_dim: 64, num_heads: 4, ff_dim: 128, num_layers: 2, max_seq_len: 32, vocab_size: 10 };
        assert!(c.validate().is_ok());
        c.num_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sinusoid_rows_differ() {
        let pe = sinusoidal::<f64>(0..4, 8);
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(pe.row(i), pe.row(j));
            }
        }
        let neg = sinusoidal::<f64>(prefix_positions(2), 8);
        assert_eq!(neg.rows(), 2);
        assert_eq!(neg.row(0)[1], (-2.0f64).cos());
    }
}
