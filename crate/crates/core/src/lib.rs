//! Character-level decoder-only language modeling for classical Chinese.
//!
//! The crate covers the whole pipeline: corpus filtering and statistics,
//! a character vocabulary that can be extended from new text, a small
//! reverse-mode autodiff engine, a GPT-2 style decoder, causal-LM
//! pretraining plus translation and prompt-classification fine-tuning,
//! inference front-ends and the evaluation metrics (perplexity, BLEU,
//! weighted precision/recall/F1).
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`). Training and
//! checkpoints use `f32`; gradient checking re-runs the same model in `f64`.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod tasks;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 32-bit tensor, the storage type used for training.
pub type Tensor32 = numerics::Tensor<f32>;
/// 64-bit tensor, used by gradient checks.
pub type Tensor64 = numerics::Tensor<f64>;
/// 32-bit autodiff graph.
pub type Graph32 = numerics::Graph<f32>;
/// 64-bit autodiff graph.
pub type Graph64 = numerics::Graph<f64>;
/// The model type that training, checkpoints and the CLI operate on.
pub type Gpt = model::GptModel<f32>;
/// Double-precision model, convertible from and to [`Gpt`].
pub type Gpt64 = model::GptModel<f64>;
