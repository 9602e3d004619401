//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Just enough ops for the encoder forward pass and the contrastive loss,
//! all single-threaded f32 with exact gradient-check support in the tests.

mod checkpoint;
mod tape;
mod tensor;

pub use checkpoint::{ParamContainer, ParamEntry, PARAM_FORMAT};
pub use tape::Tape;
pub use tensor::Tensor;
