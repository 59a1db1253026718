use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type of a [`ParameterMap`](crate::ParameterMap).
///
/// Storage happens in `Self`; every reduction and every merge rule widens to
/// `f64`, computes there, and rounds back once per element.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag used in reports and checkpoint headers.
    const DTYPE: &'static str;

    fn widen(self) -> f64;

    fn narrow(x: f64) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "F32";

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn narrow(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "F64";

    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(x: f64) -> Self {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widen_narrow_roundtrip_is_exact_for_f32() {
        for x in [0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, 1e-45, f32::MAX, f32::INFINITY] {
            assert_eq!(f32::narrow(x.widen()).to_bits(), x.to_bits());
        }
    }
}
