//! Scalar abstraction: every numeric routine in this crate is generic over
//! the floating-point type through this trait. f32 is the default lane for
//! model inference and adaptation, f64 for oracles and gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an f64 literal into the active scalar type.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 -> scalar conversion")
}
