//! Floating-point abstraction: training runs in `f32`, gradient checks in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type for all tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + Copy + Debug + Display + Send + Sync + Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// ln(1 + e^x), stable for large |x|.
    fn softplus(self) -> Self {
        let zero = Self::zero();
        let big = if self > zero { self } else { zero };
        big + (-self.abs()).exp().ln_1p()
    }

    /// Logistic sigmoid.
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}
