//! Scalar abstraction for the numeric core.
//!
//! All vector math is generic over [`Scalar`], so the pipeline can run at
//! `f32` or `f64`. Banks always store 32-bit floats on disk; the default
//! instantiation everywhere else is `f64` so that accumulation error stays
//! negligible next to the stored precision.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point scalar usable by the engine.
pub trait Scalar: Float + Debug + Display + Send + Sync + 'static {}

impl<T> Scalar for T where T: Float + Debug + Display + Send + Sync + 'static {}

/// Cast an `f64` into the working scalar.
#[inline]
pub(crate) fn cast<S: Scalar>(x: f64) -> S {
    S::from(x).expect("f64 -> scalar cast")
}

/// Widen the working scalar to `f64`.
#[inline]
pub(crate) fn upcast<S: Scalar>(x: S) -> f64 {
    x.to_f64().expect("scalar -> f64 cast")
}
