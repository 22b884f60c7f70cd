//! Scalar abstraction shared by every numeric module.

use nalgebra as na;
use num_traits as nt;

/// Floating point types the estimator can run on (`f32`, `f64`).
pub trait Real:
    na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive + std::fmt::Display
{
    /// Machine epsilon.
    const EPS: Self;
}

impl Real for f32 {
    const EPS: Self = f32::EPSILON;
}

impl Real for f64 {
    const EPS: Self = f64::EPSILON;
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
