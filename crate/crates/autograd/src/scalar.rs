//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};

/// Floating-point element type of all tensors in the workspace.
///
/// Random draws are always performed in `f64` and converted, so an `f32`
/// pipeline sees the same sample sequence as an `f64` one, merely rounded.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
