//! Float abstraction for the numerical core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the flow math is generic over.
///
/// Implemented for `f32` and `f64`. The estimator itself defaults to `f64`;
/// `f32` matches the on-disk flow format and halves memory for large frames.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Convert from `f64`, the type all configuration is expressed in.
    fn from_f64_s(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Widen (or pass through) to `f64` for reporting.
    fn to_f64_s(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `T::from_f64_s` in expression-heavy code.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64_s(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_f64() {
        assert_eq!(f32::from_f64_s(1.5), 1.5f32);
        assert_eq!(f64::from_f64_s(1.5), 1.5f64);
        assert_eq!(0.25f32.to_f64_s(), 0.25f64);
        assert_eq!(sc::<f64>(-3.0), -3.0);
    }
}
