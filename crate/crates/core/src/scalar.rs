//! Floating-point abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checks and reference computations use
//! `f64`. Everything in between is written once against [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};

/// f32 or f64.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Infallible for the two implementors.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().unwrap()
    }

    #[inline]
    fn relu(self) -> Self {
        if self > Self::zero() {
            self
        } else {
            Self::zero()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts between the two scalar types.
#[inline]
pub fn cast<A: Scalar, B: Scalar>(x: A) -> B {
    B::lit(x.as_f64())
}
