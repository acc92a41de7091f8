//! Reverse-mode automatic differentiation over dense `[C, H, W]` tensors.
//!
//! A [`Tape`] records each op applied during a forward pass; [`Tape::backward`] walks it in
//! reverse to produce gradients for trainable leaves. Ops are single-threaded and
//! deterministic: identical inputs always produce bitwise-identical outputs and gradients.

pub mod adam;
pub mod check;
mod error;
pub mod ops;
mod real;
mod tape;
mod tensor;

pub use adam::Adam;
pub use error::{Result, TensorError};
pub use real::{gemm, gemm_view, DType, MatRef, Real};
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::Tensor;
