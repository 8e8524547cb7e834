//! Precision abstraction.
//!
//! Single precision (`f32`) is the model compute type; double precision
//! (`f64`) is the oracle and gradient-check type. Numerical floors differ
//! per precision, so they live on the trait instead of being hard-coded
//! at call sites.

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Floor below which a feature-vector sum counts as zero (sum normalization).
    const EPS_SUM: Self;
    /// Floor below which the attention normalizer `z.q` counts as underflow.
    const EPS_NORM: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    const EPS_SUM: Self = 1e-6;
    const EPS_NORM: Self = 1e-6;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const EPS_SUM: Self = 1e-12;
    const EPS_NORM: Self = 1e-12;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Logistic sigmoid, 1 / (1 + exp(-x)).
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Inverse sigmoid (logit), ln(p / (1 - p)).
#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// ELU(x) + 1: x + 1 for x >= 0, exp(x) for x < 0. Strictly positive.
#[inline]
pub fn elu1<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

/// Derivative of `elu1`: 1 for x >= 0, exp(x) for x < 0.
#[inline]
pub fn elu1_deriv<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_midpoint() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_saturates() {
        assert!(sigmoid(30.0f64) > 1.0 - 1e-9);
        assert!(sigmoid(-30.0f64) < 1e-9);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for &p in &[0.007f64, 0.25, 0.5, 0.93] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn elu1_at_zero_is_one() {
        assert_eq!(elu1(0.0f64), 1.0);
        assert_eq!(elu1(5.0f64), 6.0);
        assert!((elu1(-1.0f64) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn elu1_strictly_positive() {
        for &x in &[-50.0f64, -3.0, -0.1, 0.0, 0.1, 7.0] {
            assert!(elu1(x) > 0.0, "elu1({x}) not positive");
        }
    }
}
