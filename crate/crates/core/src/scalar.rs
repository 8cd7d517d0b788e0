//! Scalar abstraction for the trainable parameter types.

use num_traits::Float;

/// Floating-point scalar the model parameters are stored in.
///
/// All heavy reductions and the CRF dynamic programs convert through `f64`
/// and back, so instantiating at `f32` only affects parameter storage
/// precision, not accumulation precision.
pub trait Scalar: Float + Copy + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_(self) -> f64 {
        self
    }
}
