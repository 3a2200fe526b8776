//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! Build a [`Tape`], register inputs with [`Tape::leaf`] (differentiable) or
//! [`Tape::constant`], compose primitives, then call [`Tape::backward`] on a
//! scalar result.
//!
//! Shapes never broadcast implicitly. The two broadcasting primitives,
//! [`Tape::add_broadcast`] and [`Tape::mul_broadcast`], require the second
//! operand to match the trailing dimensions of the first exactly.

mod error;
pub mod fft;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{compare_gradients, grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
