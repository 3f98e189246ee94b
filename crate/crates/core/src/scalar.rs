//! Scalar abstraction shared by voxel storage and transform arithmetic.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar (`f32` or `f64`).
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {
    /// Converts an `f64` constant into `Self`, rounding to nearest.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts a 3-vector between scalar types.
#[inline]
pub fn cast3<A: Real, B: Real>(v: [A; 3]) -> [B; 3] {
    [B::lit(v[0].as_f64()), B::lit(v[1].as_f64()), B::lit(v[2].as_f64())]
}

#[inline]
pub(crate) fn norm3<S: Real>(v: [S; 3]) -> S {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
