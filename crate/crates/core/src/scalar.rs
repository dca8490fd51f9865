//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar type the vision and learning code is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Squared Euclidean distance between equal-length slices.
#[inline]
pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc
}

/// Sample mean and (n-1) standard deviation. Returns `(mean, 0)` for a single value.
pub fn mean_and_sd<T: Scalar>(values: &[T]) -> (T, T) {
    // Welford: constant input gives exactly that mean and a zero deviation
    let mut mean = T::zero();
    let mut m2 = T::zero();
    for (k, v) in values.iter().enumerate() {
        let d = *v - mean;
        mean = mean + d / T::from_usize_lossy(k + 1);
        m2 = m2 + d * (*v - mean);
    }
    if values.len() < 2 {
        return (mean, T::zero());
    }
    (mean, (m2 / T::from_usize_lossy(values.len() - 1)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_values_have_zero_sd() {
        let (m, sd) = mean_and_sd(&[0.7f64; 10]);
        assert_eq!(m, 0.7);
        assert_eq!(sd, 0.0);
    }

    #[test]
    fn sample_sd_uses_n_minus_one() {
        let (m, sd) = mean_and_sd(&[1.0f64, 3.0]);
        assert_eq!(m, 2.0);
        assert!((sd - 2f64.sqrt()).abs() < 1e-15);
    }
}
