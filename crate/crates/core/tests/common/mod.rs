#![allow(dead_code)]

use qlab_core::data::Vocab;
use qlab_core::frozen::{FrozenConfig, LmKind, VisionConfig};
use qlab_core::nn::BlockConfig;
use qlab_core::qformer::QFormerConfig;

/// Small enough for f64 gradient checks, shaped like the default toy models.
pub fn small_frozen(kind: LmKind) -> FrozenConfig {
    FrozenConfig {
        vision: VisionConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            block: BlockConfig {
                model_dim: 16,
                num_heads: 2,
                ff_dim: 32,
                num_layers: 2,
                max_seq_len: 24,
                vocab_size: 1,
            },
        },
        lm_kind: kind,
        lm: BlockConfig {
            model_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            num_layers: 2,
            max_seq_len: 48,
            vocab_size: Vocab::new().len(),
        },
    }
}

pub fn small_qformer() -> QFormerConfig {
    QFormerConfig {
        num_queries: 4,
        dim: 16,
        num_heads: 2,
        ff_dim: 32,
        num_blocks: 2,
        vision_dim: 16,
        lm_dim: 16,
        vocab_size: Vocab::new().len(),
        max_prompt_len: 32,
    }
}

pub fn ids(text: &str) -> Vec<usize> {
    Vocab::new().tokenize(text, true).unwrap()
}
