//! Spatial transforms: affine, cubic B-spline FFD, their composition, dense displacement
//! fields and numerical inversion.
//!
//! Every transform maps *fixed-space* world coordinates (mm) to *moving-space* world
//! coordinates, i.e. it is a pull-back map used directly for resampling.

mod affine;
mod bspline;
mod composite;
mod dense;

pub(crate) use affine::{mat_mul, mat_vec};
pub use affine::{Affine, MIN_DETERMINANT};
pub use bspline::{basis, basis_d1, basis_d2, Ffd, Stencil};
pub use composite::Composite;
pub use dense::{invert, DenseField, InverseStats, Inversion};

use crate::scalar::Real;

#[derive(Debug, Clone, thiserror::Error)]
pub enum TransformError {
    #[error("affine matrix is singular (det = {determinant:e})")]
    DegenerateAffine { determinant: f64 },
    #[error("invalid control lattice: {0}")]
    InvalidLattice(String),
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(
        "inversion did not converge: {fraction_within:.4} of interior points within tolerance, worst residual {worst_residual:.4} mm"
    )]
    NonConvergence { worst_residual: f64, fraction_within: f64 },
    #[error("transform file: {0}")]
    Parse(String),
    #[error("transform i/o: {0}")]
    Io(String),
}

/// Point map between world coordinate frames.
pub trait SpatialTransform<S: Real> {
    fn apply_point(&self, x: [S; 3]) -> [S; 3];
}

impl<S: Real, T: SpatialTransform<S> + ?Sized> SpatialTransform<S> for &T {
    #[inline]
    fn apply_point(&self, x: [S; 3]) -> [S; 3] {
        (**self).apply_point(x)
    }
}

impl<S: Real, T: SpatialTransform<S> + ?Sized> SpatialTransform<S> for Box<T> {
    #[inline]
    fn apply_point(&self, x: [S; 3]) -> [S; 3] {
        (**self).apply_point(x)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Identity;

impl<S: Real> SpatialTransform<S> for Identity {
    #[inline]
    fn apply_point(&self, x: [S; 3]) -> [S; 3] {
        x
    }
}

/// `outer ∘ inner`.
#[derive(Debug, Clone)]
pub struct Composed<A, B> {
    pub outer: A,
    pub inner: B,
}

impl<S: Real, A: SpatialTransform<S>, B: SpatialTransform<S>> SpatialTransform<S> for Composed<A, B> {
    #[inline]
    fn apply_point(&self, x: [S; 3]) -> [S; 3] {
        self.outer.apply_point(self.inner.apply_point(x))
    }
}

/// Pointwise composition: `compose_point_map(a, b)(x) = a(b(x))`.
pub fn compose_point_map<A, B>(a: A, b: B) -> Composed<A, B> {
    Composed { outer: a, inner: b }
}
