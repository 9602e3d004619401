//! Contrastive passage/critique alignment at desk scale.
//!
//! A dual text encoder trained with a symmetric contrastive objective maps
//! story passages and critiques into a shared embedding space, so critiques
//! can be ranked, stories classified zero-shot against natural-language
//! labels, and model score distributions compared against aggregated human
//! votes. Ships with the JSONL preprocessing pipeline (quote masking,
//! anonymization, short-record filtering), a chunked training step that
//! reproduces full-batch gradients at sub-batch memory, and an evaluation
//! harness emitting box-plot-ready summaries.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod tokenizer;
pub mod training;
pub mod zeroshot;

pub use error::{Error, Result};
