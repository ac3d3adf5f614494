//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! then accumulates gradients for all recorded nodes in one sweep. One tape
//! is built per batch and dropped afterwards, so node storage never outlives
//! a training step.

mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use tensor::cosine as tensor_cosine;
