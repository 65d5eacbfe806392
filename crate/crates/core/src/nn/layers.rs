use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Mask, Scalar, Var};

use super::sinusoidal;

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: store.normal(&format!("{name}.w"), &[in_dim, out_dim], std, rng),
            bias: store.zeros(&format!("{name}.b"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self { gain: store.ones(&format!("{name}.g"), &[dim]), bias: store.zeros(&format!("{name}.b"), &[dim]) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Scaled dot-product multi-head attention with output projection. Serves as
/// self-attention (`queries_in == keys_values_in`) and cross-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    /// `dim`: query/model width; `kv_dim`: width of the attended sequence.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), kv_dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), kv_dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `queries_in: [q, dim]`, `keys_values_in: [kv, kv_dim]`, optional mask
    /// `[q, kv]`. Returns `[q, dim]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries_in: Var,
        keys_values_in: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        if g.value(queries_in).cols() != self.query.in_dim {
            return Err(Error::shape(format!(
                "attention queries have width {}, expected {}",
                g.value(queries_in).cols(),
                self.query.in_dim
            )));
        }
        if g.value(keys_values_in).cols() != self.key.in_dim {
            return Err(Error::shape(format!(
                "attention keys/values have width {}, expected {}",
                g.value(keys_values_in).cols(),
                self.key.in_dim
            )));
        }
        let q = self.query.forward(g, store, queries_in)?;
        let k = self.key.forward(g, store, keys_values_in)?;
        let v = self.value.forward(g, store, keys_values_in)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * hd, hd)?, g.slice_cols(k, h * hd, hd)?, g.slice_cols(v, h * hd, hd)?)
            };
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let p = g.masked_softmax(s, mask)?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.out.forward(g, store, cat)
    }
}

/// Token table plus fixed sinusoidal positions.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
    pub max_seq_len: usize,
}

impl TokenEmbedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab_size: usize,
        dim: usize,
        max_seq_len: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            table: store.normal(&format!("{name}.table"), &[vocab_size, dim], 1.0, rng),
            vocab_size,
            dim,
            max_seq_len,
        }
    }

    /// Raw token rows without positions.
    pub fn lookup<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} >= vocab size {}", self.vocab_size)));
        }
        if ids.len() > self.max_seq_len {
            return Err(Error::Length(format!("sequence of {} exceeds max_seq_len {}", ids.len(), self.max_seq_len)));
        }
        let table = g.param(store, self.table);
        g.gather_rows(table, ids)
    }

    /// Token rows plus positions `start..start + ids.len()`.
    pub fn embed_at<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[usize],
        start: i64,
    ) -> Result<Var> {
        let tok = self.lookup(g, store, ids)?;
        let pe = g.constant(sinusoidal(start..start + ids.len() as i64, self.dim));
        g.add(tok, pe)
    }

    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        self.embed_at(g, store, ids, 0)
    }
}
