//! Scalar abstraction for the numeric core.
//!
//! All math in the tensor engine, the metric head and the evaluation
//! code is generic over [`Scalar`]; concrete pipelines use the [`crate::Real`]
//! alias (f64). f32 is supported for experimentation but the gradient
//! checks assume f64 headroom.

use num_traits::Float;

/// Floating scalar usable by the tensor engine.
pub trait Scalar:
    Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (used for constants and RNG draws).
    fn from_f64(v: f64) -> Self;
    /// Lossy conversion to f64 (used for reporting and serialization).
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
