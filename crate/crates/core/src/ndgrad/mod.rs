//! Dense `f64` arrays with tape-based reverse-mode differentiation.

mod check;
mod tape;
mod tensor;


pub use check::{grad_check, GradCheck};
pub use tape::{gelu_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;
