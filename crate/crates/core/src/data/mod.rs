//! Synthetic shape world: scenes on a 4×4 grid, rendered 32×32 images,
//! templated captions and QA pairs, a closed word-level vocabulary and the
//! captioning / VQA metrics.

mod dataset;
mod metrics;
mod scene;
mod vocab;

pub use dataset::{
    gen_dataset, load_dataset, save_dataset, Dataset, QaPair, Sample, Split, SplitSpec, Task, CAPTION_PROMPTS,
    MIN_SCENES,
};
pub use metrics::{bleu4, exact_match_accuracy};
pub use scene::{render, Color, Object, Scene, Shape, CELL, CHANNELS, GRID, IMAGE_SIZE, MAX_OBJECTS};
pub use vocab::{is_special, strip_special, Vocab, END, PAD, START, UNK};
