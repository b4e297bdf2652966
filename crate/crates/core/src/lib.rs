//! Prior/posterior visual-object grounding for visual dialog.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation over `f64` tensors
//! - [`data`]: dialog schema, tokenizer, feature files, synthetic generator, batching
//! - [`model`]: context/answer/visual encoders, the grounding module, decoders
//! - [`training`]: loss composition, Adam, learning-rate schedule, train loop, checkpoints
//! - [`evaluation`]: retrieval metrics, grounding accuracy, distribution ablations
//!
//! Runnable walkthroughs live in `examples/`; the `visground` binary wraps
//! data generation, training and evaluation.

pub mod autodiff;
pub mod data;
mod error;
pub mod evaluation;
pub mod model;
pub mod training;

pub use error::{Error, Result};
