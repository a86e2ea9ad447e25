//! Scalar abstraction for the numeric core.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating-point scalar the tape, encoders and trainers are generic over.
///
/// `f64` is the shipped default ([`crate::Real`]); `f32` is supported for
/// anyone trading precision for speed. Checkpoints always store `f64` on
/// disk and convert on load.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Lossy conversion from `f64`, used for config constants and literals.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any supported scalar")
    }

    /// Lossy conversion to `f64`, used for logging and checkpoints.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("supported scalars convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `S::from_f64_lossy`, handy in numeric code.
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64_lossy(x)
}
