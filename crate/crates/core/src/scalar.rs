//! Floating-point abstraction shared by every numeric routine in the crate.

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rustfft::FftNum;
use std::iter::Sum;

/// Real scalar the reconstruction code is generic over (`f32` or `f64`).
pub trait Scalar: NdFloat + FromPrimitive + FftNum + Default + Sum {
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
