use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{BlockConfig, CausalLm, Decoder, EncoderStack, LayerNorm, TokenEmbedding};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmKind {
    EncoderDecoder,
    DecoderOnly,
}

/// Encoder-decoder LM with one token table shared by both halves. The
/// encoder output is the final-normed top layer.
#[derive(Clone, Debug)]
pub struct EncDecLm {
    pub embedding: TokenEmbedding,
    pub encoder: EncoderStack,
    pub enc_ln: LayerNorm,
    pub decoder: Decoder,
}

impl EncDecLm {
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
            encoder: EncoderStack::new(store, &format!("{name}.enc"), cfg, rng),
            enc_ln: LayerNorm::new(store, &format!("{name}.enc_ln"), cfg.model_dim),
            decoder: Decoder::new(store, &format!("{name}.dec"), cfg, rng),
        }
    }

    /// Encodes already-embedded rows `[len, d]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        capture: bool,
    ) -> Result<(Var, Option<Vec<Var>>)> {
        let (h, states) = self.encoder.forward(g, store, x, None, capture)?;
        Ok((self.enc_ln.forward(g, store, h)?, states))
    }

    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        memory: Var,
        prefix_ids: &[usize],
    ) -> Result<Var> {
        self.decoder.forward(g, store, &self.embedding, prefix_ids, memory)
    }
}

#[derive(Clone, Debug)]
pub enum LanguageModel {
    EncoderDecoder(EncDecLm),
    DecoderOnly(CausalLm),
}

impl LanguageModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, kind: LmKind, cfg: &BlockConfig, rng: &mut Rng) -> Self {
        match kind {
            LmKind::EncoderDecoder => LanguageModel::EncoderDecoder(EncDecLm::new(store, "lm", cfg, rng)),
            LmKind::DecoderOnly => LanguageModel::DecoderOnly(CausalLm::new(store, "lm", cfg, rng)),
        }
    }

    pub fn kind(&self) -> LmKind {
        match self {
            LanguageModel::EncoderDecoder(_) => LmKind::EncoderDecoder,
            LanguageModel::DecoderOnly(_) => LmKind::DecoderOnly,
        }
    }

    pub fn embedding(&self) -> &TokenEmbedding {
        match self {
            LanguageModel::EncoderDecoder(m) => &m.embedding,
            LanguageModel::DecoderOnly(m) => &m.embedding,
        }
    }

    /// Layers in the stack that [`lm_layer_states`](super::FrozenBundle::lm_layer_states) reports.
    pub fn depth(&self) -> usize {
        match self {
            LanguageModel::EncoderDecoder(m) => m.encoder.layers.len(),
            LanguageModel::DecoderOnly(m) => m.depth(),
        }
    }
}
