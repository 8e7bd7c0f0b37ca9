//! Minimal reverse-mode automatic differentiation over dense `f32` arrays.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse and leaves a gradient on every node that
//! requires one. The operator set is exactly what the generator,
//! discriminator and reconstruction losses use.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradient, grad_check};
pub use tape::{Tape, Var, BCE_EPS};
pub use tensor::Tensor;
