//! Small dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Values live in a [`Graph`]; every operation on a [`Var`] records a node and
//! a backward closure. [`Graph::backward`] returns [`Gradients`] for every
//! differentiable leaf. Elementwise operands may broadcast over leading batch
//! dims only; any other shape mismatch is an error.

mod element;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use element::{gemm, Float, Precision};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{pixel_shuffle_tensor, pixel_unshuffle_tensor, Conv2dSpec};
pub use tensor::{numel, Tensor};
