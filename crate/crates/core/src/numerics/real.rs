//! Element type abstraction: the whole stack runs in `f32` for training and
//! `f64` for gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Scalar element of a [`super::Tensor`]. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const BITS: u32;

    fn to_f64s(self) -> f64;
    fn from_f64s(x: f64) -> Self;
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn to_f64s(self) -> f64 {
        self as f64
    }
    fn from_f64s(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn to_f64s(self) -> f64 {
        self
    }
    fn from_f64s(x: f64) -> Self {
        x
    }
}

/// Shorthand for converting a literal into the element type.
#[inline(always)]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64s(x)
}
