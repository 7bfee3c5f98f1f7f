//! Floating point abstraction shared by all numeric modules.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Gathers the traits needed for generic numeric code (`f32`, `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossless for `f32` and `f64` inputs that originated as `f32`.
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite scalar")
    }

    /// Round trip through `f32`, the export precision of models.
    fn quantize_f32(self) -> Self {
        <Self as Scalar>::of_f64(self.as_f64() as f32 as f64)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + Sum
        + Default
        + Debug
        + Send
        + Sync
        + 'static
{
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot_f64<T: Scalar>(a: &[f64], v: &[T]) -> f64 {
    a.iter()
        .zip(v)
        .fold(0.0, |acc, (&x, &y)| acc + x * y.as_f64())
}
