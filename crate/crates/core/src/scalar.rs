//! Scalar abstraction: all numeric code is generic over `Real`, instantiated
//! with `f32` or `f64` (see the type aliases at the crate root).

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar for all tracking math: `f32` or `f64`.
pub trait Real:
    nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default + std::fmt::Display
{
    /// Lossless-enough conversion from a literal or parsed `f64`.
    fn of(value: f64) -> Self {
        nalgebra::convert(value)
    }

    /// Conversion to `f64` for formatting and reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("real scalar converts to f64")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in real scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}
