//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values are plain row-major [`Tensor`]s. Wrapping one in a [`Var`] on a
//! [`Tape`] records every subsequent operation so that [`Var::backward`] can
//! return the gradients of all leaves.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod real;
pub mod tape;
pub mod tensor;

pub use conv::{conv2d_backward, conv2d_forward, Conv2dOpts};
pub use error::{Result, TensorError};
pub use real::{gemm, Real};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
