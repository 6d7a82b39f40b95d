//! Scalar abstraction shared by every numeric module.
//!
//! All math is written against [`Real`], which is implemented for `f32` and
//! `f64`. Constants are written as `f64` literals and converted with [`lit`].

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the inference routines.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Smallest positive value treated as distinguishable from zero in norms.
    fn tiny() -> Self;
}

impl Real for f64 {
    fn tiny() -> Self {
        f64::MIN_POSITIVE
    }
}

impl Real for f32 {
    fn tiny() -> Self {
        f32::MIN_POSITIVE
    }
}

/// Converts an `f64` constant into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant representable in target scalar")
}

/// Converts `T` back to `f64` for reporting.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
