use serde::{Deserialize, Serialize};

use super::{SpatialTransform, TransformError};
use crate::scalar::Real;

/// `x ↦ matrix · x + translation`, world mm to world mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Affine<S> {
    pub matrix: [[S; 3]; 3],
    pub translation: [S; 3],
}

/// Determinant magnitude below which an affine is treated as singular.
pub const MIN_DETERMINANT: f64 = 1e-9;

impl<S: Real> Affine<S> {
    pub fn identity() -> Self {
        let (o, z) = (S::one(), S::zero());
        Self {
            matrix: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    pub fn translation(t: [S; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn new(matrix: [[S; 3]; 3], translation: [S; 3]) -> Result<Self, TransformError> {
        let a = Self { matrix, translation };
        a.check_invertible()?;
        Ok(a)
    }

    /// `x ↦ m · (x − center) + center`.
    pub fn linear_about(matrix: [[S; 3]; 3], center: [S; 3]) -> Self {
        let mc = mat_vec(&matrix, center);
        Self {
            matrix,
            translation: [0, 1, 2].map(|a| center[a] - mc[a]),
        }
    }

    /// Rotation `Rz(γ) · Ry(β) · Rx(α)` about `center`; angles in radians.
    pub fn rotation_about(angles: [S; 3], center: [S; 3]) -> Self {
        Self::linear_about(euler_matrix(angles), center)
    }

    pub fn scaling_about(scale: [S; 3], center: [S; 3]) -> Self {
        let z = S::zero();
        Self::linear_about([[scale[0], z, z], [z, scale[1], z], [z, z, scale[2]]], center)
    }

    pub fn determinant(&self) -> S {
        det3(&self.matrix)
    }

    pub fn check_invertible(&self) -> Result<(), TransformError> {
        let d = self.determinant();
        if !(d.abs().as_f64() > MIN_DETERMINANT) {
            return Err(TransformError::DegenerateAffine {
                determinant: d.as_f64(),
            });
        }
        Ok(())
    }

    pub fn inverse(&self) -> Result<Self, TransformError> {
        self.check_invertible()?;
        let inv = inv3(&self.matrix);
        let t = mat_vec(&inv, self.translation);
        Ok(Self {
            matrix: inv,
            translation: t.map(|v| -v),
        })
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn after(&self, inner: &Self) -> Self {
        let m = mat_mul(&self.matrix, &inner.matrix);
        let t = mat_vec(&self.matrix, inner.translation);
        Self {
            matrix: m,
            translation: [0, 1, 2].map(|a| t[a] + self.translation[a]),
        }
    }

    #[inline]
    pub fn apply(&self, x: [S; 3]) -> [S; 3] {
        let y = mat_vec(&self.matrix, x);
        [
            y[0] + self.translation[0],
            y[1] + self.translation[1],
            y[2] + self.translation[2],
        ]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

impl<S: Real> SpatialTransform<S> for Affine<S> {
    #[inline]
    fn apply_point(&self, x: [S; 3]) -> [S; 3] {
        self.apply(x)
    }
}

pub(crate) fn euler_matrix<S: Real>(angles: [S; 3]) -> [[S; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sg, cg) = angles[2].sin_cos();
    let (o, z) = (S::one(), S::zero());
    let rx = [[o, z, z], [z, ca, -sa], [z, sa, ca]];
    let ry = [[cb, z, sb], [z, o, z], [-sb, z, cb]];
    let rz = [[cg, -sg, z], [sg, cg, z], [z, z, o]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

#[inline]
pub(crate) fn mat_vec<S: Real>(m: &[[S; 3]; 3], v: [S; 3]) -> [S; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat_mul<S: Real>(a: &[[S; 3]; 3], b: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    let mut out = [[S::zero(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

pub(crate) fn det3<S: Real>(m: &[[S; 3]; 3]) -> S {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3<S: Real>(m: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    let d = det3(m);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / d, -c(0, 1, 2, 2) / d, c(0, 1, 1, 2) / d],
        [-c(1, 0, 2, 2) / d, c(0, 0, 2, 2) / d, -c(0, 0, 1, 2) / d],
        [c(1, 0, 2, 1) / d, -c(0, 0, 2, 1) / d, c(0, 0, 1, 1) / d],
    ]
}
