//! Scalar abstraction over the two computation precisions.
//!
//! Training runs in `f32`; verification suites (gradient checks, integer
//! cross-simulation) run in `f64`. Everything numeric in this crate is
//! generic over [`Scalar`] so the precision is a type choice, not a flag.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensors: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widen to `f64` (exact for both supported types).
    fn to64(self) -> f64 {
        self.to_f64().expect("Scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Round to nearest integer, ties to even, in `f64`.
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}
