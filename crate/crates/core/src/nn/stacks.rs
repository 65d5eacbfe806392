use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Mask, Scalar, Var};

use super::layers::{Attention, FeedForward, LayerNorm, Linear, TokenEmbedding};
use super::{prefix_positions, sinusoidal, BlockConfig};

/// Pre-norm block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let d = cfg.model_dim;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, d, cfg.num_heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_dim, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub dim: usize,
}

impl EncoderStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Self {
        Self {
            layers: (0..cfg.num_layers).map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), cfg, rng)).collect(),
            dim: cfg.model_dim,
        }
    }

    /// Runs the stack. With `capture`, also returns `num_layers + 1` states
    /// (entry 0 is `x` itself). An empty stack is the identity.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: Option<&Mask>,
        capture: bool,
    ) -> Result<(Var, Option<Vec<Var>>)> {
        if g.value(x).rank() != 2 || g.value(x).cols() != self.dim {
            return Err(Error::shape(format!("encoder input {:?}, expected [len, {}]", g.shape(x), self.dim)));
        }
        let mut states = capture.then(|| vec![x]);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h, mask)?;
            if let Some(s) = states.as_mut() {
                s.push(h);
            }
        }
        Ok((h, states))
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over a
/// memory sequence, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let d = cfg.model_dim;
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(store, &format!("{name}.self"), d, d, cfg.num_heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: Attention::new(store, &format!("{name}.cross"), d, d, cfg.num_heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_dim, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        causal: &Mask,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, Some(causal))?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, h, memory, None)?;
        let x = g.add(x, c)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}

/// Autoregressive decoder that cross-attends to a memory sequence. Memory rows
/// are used as given (no positional encoding is added to them).
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
    pub head: Linear,
    pub dim: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Self {
        Self {
            layers: (0..cfg.num_layers).map(|i| DecoderLayer::new(store, &format!("{name}.{i}"), cfg, rng)).collect(),
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), cfg.model_dim),
            head: Linear::new(store, &format!("{name}.head"), cfg.model_dim, cfg.vocab_size, rng),
            dim: cfg.model_dim,
        }
    }

    /// Logits `[len, vocab]` for `prefix_ids` conditioned on `memory`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embedding: &TokenEmbedding,
        prefix_ids: &[usize],
        memory: Var,
    ) -> Result<Var> {
        if prefix_ids.is_empty() {
            return Err(Error::contract("decoder prefix must be non-empty"));
        }
        if g.value(memory).rank() != 2 || g.value(memory).cols() != self.dim {
            return Err(Error::shape(format!("decoder memory {:?}, expected [m, {}]", g.shape(memory), self.dim)));
        }
        let mut h = embedding.embed(g, store, prefix_ids)?;
        let causal = Mask::causal(prefix_ids.len());
        for layer in &self.layers {
            h = layer.forward(g, store, h, memory, &causal)?;
        }
        let h = self.final_ln.forward(g, store, h)?;
        self.head.forward(g, store, h)
    }
}

/// Input of a [`CausalLm`]: token ids (embedded with positions `0..len`) or
/// rows that are already embedded.
#[derive(Clone, Copy, Debug)]
pub enum CausalInput<'a> {
    Ids(&'a [usize]),
    States(Var),
}

/// Rows spliced into the hidden sequence of a [`CausalLm`] just before layer
/// `layer + 1` (so `layer == 0` is embedding level), inserted before text row
/// `at`. Injected rows get positional encodings for positions `-m..-1`.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub layer: usize,
    pub states: Var,
    pub at: usize,
}

/// Decoder-only language model (causal self-attention stack).
#[derive(Clone, Debug)]
pub struct CausalLm {
    pub embedding: TokenEmbedding,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
    pub head: Linear,
    pub dim: usize,
}

impl CausalLm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Self {
        Self {
            embedding: TokenEmbedding::new(
                store,
                &format!("{name}.embed"),
                cfg.vocab_size,
                cfg.model_dim,
                cfg.max_seq_len,
                rng,
            ),
            layers: (0..cfg.num_layers).map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), cfg, rng)).collect(),
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), cfg.model_dim),
            head: Linear::new(store, &format!("{name}.head"), cfg.model_dim, cfg.vocab_size, rng),
            dim: cfg.model_dim,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Returns logits for text rows only (`[text_len, vocab]`) and the
    /// text-row hidden states (entry 0 = embeddings).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: CausalInput<'_>,
        inject: Option<Injection>,
    ) -> Result<(Var, Vec<Var>)> {
        self.forward_until(g, store, input, inject, self.layers.len()).and_then(|(states, last)| {
            let h = self.final_ln.forward(g, store, last)?;
            Ok((self.head.forward(g, store, h)?, states))
        })
    }

    /// Runs layers `1..=upto` and returns (text-row states, final text rows).
    pub fn forward_until<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: CausalInput<'_>,
        inject: Option<Injection>,
        upto: usize,
    ) -> Result<(Vec<Var>, Var)> {
        let x = match input {
            CausalInput::Ids(ids) => self.embedding.embed(g, store, ids)?,
            CausalInput::States(v) => {
                if g.value(v).cols() != self.dim {
                    return Err(Error::shape(format!("states {:?}, expected [len, {}]", g.shape(v), self.dim)));
                }
                v
            }
        };
        let text_len = g.value(x).rows();
        if let Some(inj) = &inject {
            if inj.layer > self.layers.len() {
                return Err(Error::contract(format!(
                    "injection layer {} outside 0..={}",
                    inj.layer,
                    self.layers.len()
                )));
            }
            if g.value(inj.states).cols() != self.dim {
                return Err(Error::shape(format!(
                    "prefix states {:?}, expected [m, {}]",
                    g.shape(inj.states),
                    self.dim
                )));
            }
            if inj.at > text_len {
                return Err(Error::contract(format!("injection offset {} beyond {text_len} text rows", inj.at)));
            }
        }
        let mut states = vec![x];
        let mut h = x;
        let mut spliced: Option<(usize, usize)> = None; // (at, m)
        for l in 0..=upto.min(self.layers.len()) {
            if let Some(inj) = inject.filter(|i| i.layer == l) {
                let m = g.value(inj.states).rows();
                let pe = g.constant(sinusoidal(prefix_positions(m), self.dim));
                let prefix = g.add(inj.states, pe)?;
                let head = g.slice_rows(h, 0, inj.at)?;
                let tail = g.slice_rows(h, inj.at, text_len - inj.at)?;
                h = g.concat_rows(&[head, prefix, tail])?;
                spliced = Some((inj.at, m));
            }
            if l == upto.min(self.layers.len()) {
                break;
            }
            let causal = Mask::causal(g.value(h).rows());
            h = self.layers[l].forward(g, store, h, Some(&causal))?;
            states.push(Self::text_rows(g, h, spliced, text_len)?);
        }
        let last = Self::text_rows(g, h, spliced, text_len)?;
        Ok((states, last))
    }

    fn text_rows<T: Scalar>(g: &mut Graph<T>, h: Var, spliced: Option<(usize, usize)>, text_len: usize) -> Result<Var> {
        match spliced {
            None => Ok(h),
            Some((at, m)) => {
                let head = g.slice_rows(h, 0, at)?;
                let tail = g.slice_rows(h, at + m, text_len - at)?;
                g.concat_rows(&[head, tail])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    fn cfg(layers: usize) -> BlockConfig {
        BlockConfig { model_dim: 8, num_heads: 2, ff_dim: 16, num_layers: layers, max_seq_len: 16, vocab_size: 11 }
    }

    #[test]
    fn empty_stack_is_identity_and_capture_counts() {
        let mut rng = Rng::new(1);
        let mut store: ParamStore<f64> = ParamStore::new();
        let empty = EncoderStack::new(&mut store, "e0", &cfg(0), &mut rng);
        let four = EncoderStack::new(&mut store, "e4", &cfg(4), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 8], Init::Normal { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap());
        let (y, _) = empty.forward(&mut g, &store, x, None, false).unwrap();
        assert_eq!(y, x);
        let (_, states) = four.forward(&mut g, &store, x, None, true).unwrap();
        let states = states.unwrap();
        assert_eq!(states.len(), 5);
        assert_eq!(states[0], x);
    }

    #[test]
    fn causal_lm_rejects_out_of_range_injection() {
        let mut rng = Rng::new(2);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lm = CausalLm::new(&mut store, "lm", &cfg(2), &mut rng);
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[2, 8]));
        let r = lm.forward(&mut g, &store, CausalInput::Ids(&[4, 5]), Some(Injection { layer: 3, states: p, at: 0 }));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
