//! Scalar abstraction over the two float widths the engine runs at.
//!
//! Training runs in `f32`; gradient checking instantiates the same graph
//! code at `f64` so central differences resolve below 1e-6.

use std::fmt::Debug;
use std::iter::Sum;

/// Element type of tensors. Implemented for `f32` and `f64` only.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Sum + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
