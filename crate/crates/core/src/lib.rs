//! Toy-scale laboratory comparing standard QFormer fusion (queries fed through
//! a frozen LM encoder) with language-grounded QFormer fusion (queries
//! grounded on cached encoder states of the prompt and fed straight to the
//! frozen decoder), plus the two measurement instruments used to motivate it:
//! mutual-KNN cross-layer alignment and linear-probe regression.
//!
//! Layering, bottom-up: [`tensor`] (autodiff) → [`nn`] (transformer blocks) →
//! [`frozen`] (toy vision encoder and LMs) → [`qformer`] → [`pipelines`];
//! [`analysis`] and [`data`] sit beside them and [`harness`] drives
//! everything.

pub mod analysis;
pub mod data;
pub mod error;
pub mod exec;
pub mod frozen;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipelines;
pub mod qformer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Graph, Scalar, Tensor, Var};
