//! Floating-point scalar abstraction: kernels run at f32, verification at f64.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar element type for all tensor kernels.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lossless-enough conversion from an f64 literal into the working scalar.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}
