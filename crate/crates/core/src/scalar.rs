//! Scalar abstraction: every numeric kernel in this crate is generic over the
//! element type, so the same code runs at f32 for training speed and at f64
//! for finite-difference verification.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type accepted by the tensor and model code.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from f64 (f32 rounds to nearest).
    fn from_f64_c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    /// Widen to f64 (exact for both supported types).
    fn to_f64_c(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }

    /// Total ordering on the bit pattern, used where a reduction must be
    /// independent of operand order.
    fn total_cmp_c(&self, other: &Self) -> std::cmp::Ordering;
}

impl Scalar for f32 {
    fn total_cmp_c(&self, other: &Self) -> std::cmp::Ordering {
        self.total_cmp(other)
    }
}

impl Scalar for f64 {
    fn total_cmp_c(&self, other: &Self) -> std::cmp::Ordering {
        self.total_cmp(other)
    }
}
