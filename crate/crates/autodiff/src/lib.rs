//! Minimal f64 reverse-mode autodiff over dense tensors.
//!
//! Two layers: [`RawTensor`] holds eager values and kernels, [`Tensor`]
//! records the op graph when an input requires gradients. Results whose
//! inputs are all constant collapse to leaves, so forward-only code frees
//! its intermediates as it goes.

mod check;
mod graph;
mod raw;

pub use check::assert_gradients_match;
pub use graph::{Gradients, Tensor};
pub use raw::RawTensor;
