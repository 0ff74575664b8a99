//! Dense tensors, tape-based reverse-mode differentiation and a finite-difference oracle.

mod grad_check;
mod tape;
mod tensor;

pub use grad_check::{grad_check, GradCheckReport};
pub use tape::{softmax, stable_sigmoid, AngularMargin, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

/// Norm below which a vector cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;
