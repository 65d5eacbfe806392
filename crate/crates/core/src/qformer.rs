//! The trainable bridge: learned query tokens that self-attend together with
//! the prompt (and optional grounding rows) and cross-attend to image
//! features, followed by a projection into the LM's space.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear, TokenEmbedding};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub num_blocks: usize,
    pub vision_dim: usize,
    pub lm_dim: usize,
    pub vocab_size: usize,
    pub max_prompt_len: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            dim: 64,
            num_heads: 4,
            ff_dim: 128,
            num_blocks: 4,
            vision_dim: 64,
            lm_dim: 64,
            vocab_size: Vocab::new().len(),
            max_prompt_len: 64,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields =
            [self.num_queries, self.dim, self.num_heads, self.ff_dim, self.vision_dim, self.lm_dim, self.vocab_size];
        if fields.contains(&0) {
            return Err(Error::Config(format!("qformer config has a zero field: {self:?}")));
        }
        if !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("qformer dim {} not divisible by {} heads", self.dim, self.num_heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln: LayerNorm,
    pub attn: Attention,
}

/// Pre-norm block: self-attention over the whole sequence, cross-attention
/// from the query rows only (even-indexed blocks), feed-forward.
#[derive(Clone, Debug)]
pub struct QFormerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<CrossBlock>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub config: QFormerConfig,
    pub queries: ParamId,
    pub embedding: TokenEmbedding,
    pub blocks: Vec<QFormerBlock>,
    pub final_ln: LayerNorm,
    pub grounding_adapter: Linear,
    pub out_projection: Linear,
}

impl QFormer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &QFormerConfig, rng: &mut Rng) -> Self {
        let c = config;
        let blocks = (0..c.num_blocks)
            .map(|i| {
                let n = format!("qformer.{i}");
                QFormerBlock {
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), c.dim),
                    self_attn: Attention::new(store, &format!("{n}.self"), c.dim, c.dim, c.num_heads, rng),
                    cross: (i % 2 == 0).then(|| CrossBlock {
                        ln: LayerNorm::new(store, &format!("{n}.ln_cross"), c.dim),
                        attn: Attention::new(store, &format!("{n}.cross"), c.dim, c.vision_dim, c.num_heads, rng),
                    }),
                    ln_ff: LayerNorm::new(store, &format!("{n}.ln_ff"), c.dim),
                    ff: FeedForward::new(store, &format!("{n}.ff"), c.dim, c.ff_dim, rng),
                }
            })
            .collect();
        Self {
            config: c.clone(),
            queries: store.normal("qformer.queries", &[c.num_queries, c.dim], 1.0, rng),
            embedding: TokenEmbedding::new(store, "qformer.embed", c.vocab_size, c.dim, c.max_prompt_len, rng),
            blocks,
            final_ln: LayerNorm::new(store, "qformer.final_ln", c.dim),
            grounding_adapter: Linear::new(store, "qformer.grounding_adapter", c.lm_dim, c.dim, rng),
            out_projection: Linear::new(store, "qformer.out_projection", c.dim, c.lm_dim, rng),
        }
    }

    /// Runs the blocks over `[queries; adapter(grounding); embed(prompt)]` and
    /// returns the first `n_q` rows, `[n_q, d_q]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image_feats: Var,
        prompt_ids: &[usize],
        grounding: Option<Var>,
    ) -> Result<Var> {
        let c = &self.config;
        if g.value(image_feats).rank() != 2 || g.value(image_feats).cols() != c.vision_dim {
            return Err(Error::shape(format!(
                "image features {:?}, expected [m, {}]",
                g.shape(image_feats),
                c.vision_dim
            )));
        }
        let mut parts = vec![g.param(store, self.queries)];
        if let Some(gr) = grounding {
            if g.value(gr).rank() != 2 || g.value(gr).cols() != c.lm_dim {
                return Err(Error::shape(format!("grounding states {:?}, expected [l, {}]", g.shape(gr), c.lm_dim)));
            }
            if g.value(gr).rows() > 0 {
                parts.push(self.grounding_adapter.forward(g, store, gr)?);
            }
        }
        if !prompt_ids.is_empty() {
            parts.push(self.embedding.embed(g, store, prompt_ids)?);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let total = g.value(x).rows();
        let nq = c.num_queries;
        for b in &self.blocks {
            let h = b.ln_self.forward(g, store, x)?;
            let a = b.self_attn.forward(g, store, h, h, None)?;
            x = g.add(x, a)?;
            if let Some(cross) = &b.cross {
                let q = if total == nq { x } else { g.slice_rows(x, 0, nq)? };
                let h = cross.ln.forward(g, store, q)?;
                let a = cross.attn.forward(g, store, h, image_feats, None)?;
                let q = g.add(q, a)?;
                x = if total == nq {
                    q
                } else {
                    let rest = g.slice_rows(x, nq, total - nq)?;
                    g.concat_rows(&[q, rest])?
                };
            }
            let h = b.ln_ff.forward(g, store, x)?;
            let f = b.ff.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        let q = if total == nq { x } else { g.slice_rows(x, 0, nq)? };
        self.final_ln.forward(g, store, q)
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, t: Var) -> Result<Var> {
        self.out_projection.forward(g, store, t)
    }
}

/// A QFormer architecture plus the only trainable parameter store of a run.
#[derive(Clone, Debug)]
pub struct QFormerState<T: Scalar = f32> {
    pub arch: QFormer,
    pub store: ParamStore<T>,
}

impl QFormerState<f32> {
    pub fn new(config: &QFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let arch = QFormer::new(&mut store, config, &mut Rng::new(seed).split(0x9f));
        Ok(Self { arch, store })
    }

    /// Writes `qformer.json` and the parameter directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save_dir(dir)?;
        let p = dir.join("qformer.json");
        fs::write(&p, serde_json::to_string_pretty(&self.arch.config)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("qformer.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: QFormerConfig = serde_json::from_str(&text)?;
        let mut s = Self::new(&config, 0)?;
        s.store.load_dir(dir)?;
        Ok(s)
    }
}

impl<T: Scalar> QFormerState<T> {
    pub fn config(&self) -> &QFormerConfig {
        &self.arch.config
    }

    pub fn cast<U: Scalar>(&self) -> QFormerState<U> {
        QFormerState { arch: self.arch.clone(), store: self.store.cast() }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        image_feats: Var,
        prompt_ids: &[usize],
        grounding: Option<Var>,
    ) -> Result<Var> {
        self.arch.forward(g, &self.store, image_feats, prompt_ids, grounding)
    }

    pub fn project(&self, g: &mut Graph<T>, t: Var) -> Result<Var> {
        self.arch.project(g, &self.store, t)
    }

    /// `Q(t_q, v(i), p)`: `[n_q, d_q]`.
    pub fn qformer_forward(&self, image_feats: &Tensor<T>, prompt_ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let f = g.constant(image_feats.clone());
        let out = self.forward(&mut g, f, prompt_ids, None)?;
        Ok(g.value(out).clone())
    }

    /// `Q_g([t_q, l_e(p)], v(i), p)`: `[n_q, d_q]`.
    pub fn grounded_qformer_forward(
        &self,
        enc_prompt_states: &Tensor<T>,
        image_feats: &Tensor<T>,
        prompt_ids: &[usize],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let f = g.constant(image_feats.clone());
        let e = g.constant(enc_prompt_states.clone());
        let out = self.forward(&mut g, f, prompt_ids, Some(e))?;
        Ok(g.value(out).clone())
    }

    /// `[n_q, d_q]` to `[n_q, lm_dim]`.
    pub fn project_to_lm(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let x = g.constant(t.clone());
        let out = self.project(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}
