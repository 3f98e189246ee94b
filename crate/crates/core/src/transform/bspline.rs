//! Tensor-product cubic B-spline free-form deformation.
//!
//! A lattice of control displacements `φ` (mm) with uniform knot spacing defines
//!
//! ```text
//! disp(x) = Σ_{l,m,n=0..3} B_l(u) B_m(v) B_n(w) φ[i-1+l, j-1+m, k-1+n]
//! ```
//!
//! where `(i + u, j + v, k + w) = (x − origin) / spacing`. Control indices outside the
//! lattice are clamped onto its boundary, so the map is total.

use crate::scalar::Real;
use crate::volume::Grid;

use super::{SpatialTransform, TransformError};

/// Uniform cubic B-spline basis `[B0, B1, B2, B3]` at local coordinate `u ∈ [0, 1)`.
#[inline]
pub fn basis<S: Real>(u: S) -> [S; 4] {
    let six = S::lit(6.0);
    let one = S::one();
    let u2 = u * u;
    let u3 = u2 * u;
    let v = one - u;
    [
        v * v * v / six,
        (S::lit(3.0) * u3 - S::lit(6.0) * u2 + S::lit(4.0)) / six,
        (S::lit(-3.0) * u3 + S::lit(3.0) * u2 + S::lit(3.0) * u + one) / six,
        u3 / six,
    ]
}

/// First derivative of [`basis`] with respect to `u`.
#[inline]
pub fn basis_d1<S: Real>(u: S) -> [S; 4] {
    let half = S::lit(0.5);
    let v = S::one() - u;
    [
        -v * v * half,
        (S::lit(3.0) * u * u - S::lit(4.0) * u) * half,
        (S::lit(-3.0) * u * u + S::lit(2.0) * u + S::one()) * half,
        u * u * half,
    ]
}

/// Second derivative of [`basis`] with respect to `u`.
#[inline]
pub fn basis_d2<S: Real>(u: S) -> [S; 4] {
    [
        S::one() - u,
        S::lit(3.0) * u - S::lit(2.0),
        S::lit(-3.0) * u + S::one(),
        u,
    ]
}

/// Control indices and weights of the 4×4×4 support around one point.
#[derive(Debug, Clone, Copy)]
pub struct Stencil<S> {
    pub index: [[usize; 4]; 3],
    pub weight: [[S; 4]; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ffd<S> {
    dims: [usize; 3],
    spacing: [S; 3],
    origin: [S; 3],
    coeffs: Vec<[S; 3]>,
}

impl<S: Real> Ffd<S> {
    pub fn new(dims: [usize; 3], spacing: [S; 3], origin: [S; 3], coeffs: Vec<[S; 3]>) -> Result<Self, TransformError> {
        if dims.iter().any(|&d| d < 4) {
            return Err(TransformError::InvalidLattice(format!(
                "control grid {dims:?} needs at least 4 knots per axis"
            )));
        }
        if spacing.iter().any(|s| !(s.as_f64() > 0.0) || !s.is_finite()) {
            return Err(TransformError::InvalidLattice(format!(
                "control spacing {spacing:?} must be positive"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if coeffs.len() != n {
            return Err(TransformError::LengthMismatch {
                expected: n,
                got: coeffs.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            coeffs,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [S; 3], origin: [S; 3]) -> Result<Self, TransformError> {
        Self::new(dims, spacing, origin, vec![[S::zero(); 3]; dims.iter().product()])
    }

    /// Zero lattice with knot spacing `spacing_mm` whose support fully covers `grid`:
    /// the first knot sits one spacing before the grid origin.
    pub fn covering(grid: &Grid, spacing_mm: [f64; 3]) -> Result<Self, TransformError> {
        let ext = grid.extent();
        let dims = [0, 1, 2].map(|a| (ext[a] / spacing_mm[a]).floor() as usize + 4);
        let origin = [0, 1, 2].map(|a| S::lit(grid.origin[a] - spacing_mm[a]));
        Self::zeros(dims, spacing_mm.map(S::lit), origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [S; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [S; 3] {
        self.origin
    }

    pub fn coeffs(&self) -> &[[S; 3]] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Same lattice, new control displacements.
    pub fn with_coeffs(&self, coeffs: Vec<[S; 3]>) -> Result<Self, TransformError> {
        Self::new(self.dims, self.spacing, self.origin, coeffs)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// World position of knot `(i, j, k)`.
    pub fn knot_position(&self, i: usize, j: usize, k: usize) -> [S; 3] {
        let ijk = [i, j, k];
        [0, 1, 2].map(|a| self.origin[a] + S::lit(ijk[a] as f64) * self.spacing[a])
    }

    #[inline]
    fn locate(&self, x: [S; 3]) -> ([isize; 3], [S; 3]) {
        let mut base = [0isize; 3];
        let mut frac = [S::zero(); 3];
        for a in 0..3 {
            let t = (x[a] - self.origin[a]) / self.spacing[a];
            // far outside the lattice every index clamps to the boundary anyway
            let t = t.max(S::lit(-4.0)).min(S::lit(self.dims[a] as f64 + 4.0));
            let f = t.floor();
            base[a] = f.as_f64() as isize;
            frac[a] = t - f;
        }
        (base, frac)
    }

    #[inline]
    fn clamped(&self, axis: usize, base: isize) -> [usize; 4] {
        let hi = self.dims[axis] as isize - 1;
        [0, 1, 2, 3].map(|l| (base - 1 + l).clamp(0, hi) as usize)
    }

    /// Support indices and basis weights at `x`.
    #[inline]
    pub fn stencil(&self, x: [S; 3]) -> Stencil<S> {
        let (base, frac) = self.locate(x);
        Stencil {
            index: [0, 1, 2].map(|a| self.clamped(a, base[a])),
            weight: [0, 1, 2].map(|a| basis(frac[a])),
        }
    }

    /// Displacement (mm) at world point `x`.
    #[inline]
    pub fn displacement(&self, x: [S; 3]) -> [S; 3] {
        self.displacement_with(&self.stencil(x))
    }

    #[inline]
    pub fn displacement_with(&self, st: &Stencil<S>) -> [S; 3] {
        let mut out = [S::zero(); 3];
        let nx = self.dims[0];
        let nxy = nx * self.dims[1];
        for n in 0..4 {
            let wz = st.weight[2][n];
            let oz = st.index[2][n] * nxy;
            for m in 0..4 {
                let wyz = st.weight[1][m] * wz;
                let oyz = oz + st.index[1][m] * nx;
                for l in 0..4 {
                    let w = st.weight[0][l] * wyz;
                    let c = self.coeffs[oyz + st.index[0][l]];
                    out[0] = out[0] + w * c[0];
                    out[1] = out[1] + w * c[1];
                    out[2] = out[2] + w * c[2];
                }
            }
        }
        out
    }

    /// Jacobian `∂disp_r / ∂x_c` (per mm) at `x`.
    pub fn jacobian(&self, x: [S; 3]) -> [[S; 3]; 3] {
        let (base, frac) = self.locate(x);
        let idx = [0, 1, 2].map(|a| self.clamped(a, base[a]));
        let b = [0, 1, 2].map(|a| basis(frac[a]));
        let d = [0, 1, 2].map(|a| basis_d1(frac[a]));
        let mut jac = [[S::zero(); 3]; 3];
        for n in 0..4 {
            for m in 0..4 {
                for l in 0..4 {
                    let c = self.coeffs[self.index(idx[0][l], idx[1][m], idx[2][n])];
                    let g = [
                        d[0][l] * b[1][m] * b[2][n] / self.spacing[0],
                        b[0][l] * d[1][m] * b[2][n] / self.spacing[1],
                        b[0][l] * b[1][m] * d[2][n] / self.spacing[2],
                    ];
                    for r in 0..3 {
                        for col in 0..3 {
                            jac[r][col] = jac[r][col] + c[r] * g[col];
                        }
                    }
                }
            }
        }
        jac
    }

    /// Largest control displacement norm; bounds the dense displacement everywhere.
    pub fn max_coefficient_norm(&self) -> S {
        self.coeffs
            .iter()
            .map(|c| crate::scalar::norm3(*c))
            .fold(S::zero(), |a, b| a.max(b))
    }

    /// Knot-doubled lattice representing the same deformation in the interior.
    pub fn refined(&self) -> Self {
        let mut coeffs = self.coeffs.clone();
        let mut dims = self.dims;
        for axis in 0..3 {
            let (c, d) = subdivide_axis(&coeffs, dims, axis);
            coeffs = c;
            dims = d;
        }
        let half = S::lit(0.5);
        Self {
            dims,
            spacing: self.spacing.map(|s| s * half),
            origin: self.origin,
            coeffs,
        }
    }

    pub fn bending_energy(&self) -> S {
        let (energy, _) = self.bending_energy_impl(false);
        energy
    }

    /// Gradient of [`Self::bending_energy`] with respect to every control displacement.
    pub fn bending_energy_gradient(&self) -> Vec<[S; 3]> {
        let (_, grad) = self.bending_energy_impl(true);
        grad.unwrap()
    }

    /// Mean over interior knots of `Σ_components (f_xx² + f_yy² + f_zz² + 2f_xy² + 2f_xz² + 2f_yz²)`,
    /// with derivatives in world mm evaluated analytically at the knots.
    fn bending_energy_impl(&self, want_grad: bool) -> (S, Option<Vec<[S; 3]>>) {
        let stencils = knot_stencils(self.spacing);
        let [nx, ny, nz] = self.dims;
        let knots = (nx - 2) * (ny - 2) * (nz - 2);
        let norm = S::one() / S::lit(knots as f64);
        let two = S::lit(2.0);
        let mut energy = S::zero();
        let mut grad = want_grad.then(|| vec![[S::zero(); 3]; self.coeffs.len()]);
        let mut offsets = [0usize; 27];
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    for (s, off) in offsets.iter_mut().enumerate() {
                        let (di, dj, dk) = (s % 3, (s / 3) % 3, s / 9);
                        *off = self.index(i + di - 1, j + dj - 1, k + dk - 1);
                    }
                    for (weight, coef) in &stencils {
                        let mut d = [S::zero(); 3];
                        for s in 0..27 {
                            let w = coef[s];
                            if w == S::zero() {
                                continue;
                            }
                            let c = self.coeffs[offsets[s]];
                            d[0] = d[0] + w * c[0];
                            d[1] = d[1] + w * c[1];
                            d[2] = d[2] + w * c[2];
                        }
                        energy = energy + *weight * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
                        if let Some(g) = grad.as_mut() {
                            for s in 0..27 {
                                let w = coef[s];
                                if w == S::zero() {
                                    continue;
                                }
                                let f = two * *weight * w * norm;
                                let e = &mut g[offsets[s]];
                                e[0] = e[0] + f * d[0];
                                e[1] = e[1] + f * d[1];
                                e[2] = e[2] + f * d[2];
                            }
                        }
                    }
                }
            }
        }
        (energy * norm, grad)
    }
}

impl<S: Real> SpatialTransform<S> for Ffd<S> {
    fn apply_point(&self, x: [S; 3]) -> [S; 3] {
        let d = self.displacement(x);
        [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
    }
}

/// The six second-derivative stencils at a knot (3×3×3, x fastest) with their weights.
fn knot_stencils<S: Real>(spacing: [S; 3]) -> Vec<(S, [S; 27])> {
    let b0 = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
    let b1 = [-0.5, 0.0, 0.5];
    let b2 = [1.0, -2.0, 1.0];
    let sp = spacing.map(|s| s.as_f64());
    let build = |fx: [f64; 3], fy: [f64; 3], fz: [f64; 3], scale: f64| {
        let mut out = [S::zero(); 27];
        for (s, v) in out.iter_mut().enumerate() {
            *v = S::lit(fx[s % 3] * fy[(s / 3) % 3] * fz[s / 9] * scale);
        }
        out
    };
    vec![
        (S::one(), build(b2, b0, b0, 1.0 / (sp[0] * sp[0]))),
        (S::one(), build(b0, b2, b0, 1.0 / (sp[1] * sp[1]))),
        (S::one(), build(b0, b0, b2, 1.0 / (sp[2] * sp[2]))),
        (S::lit(2.0), build(b1, b1, b0, 1.0 / (sp[0] * sp[1]))),
        (S::lit(2.0), build(b1, b0, b1, 1.0 / (sp[0] * sp[2]))),
        (S::lit(2.0), build(b0, b1, b1, 1.0 / (sp[1] * sp[2]))),
    ]
}

/// One-dimensional cubic B-spline subdivision along `axis`:
/// `c'[2i] = (c[i-1] + 6c[i] + c[i+1]) / 8`, `c'[2i+1] = (c[i] + c[i+1]) / 2`.
fn subdivide_axis<S: Real>(coeffs: &[[S; 3]], dims: [usize; 3], axis: usize) -> (Vec<[S; 3]>, [usize; 3]) {
    let n = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = 2 * n - 1;
    let idx = |d: [usize; 3], p: [usize; 3]| p[0] + d[0] * (p[1] + d[1] * p[2]);
    let mut out = vec![[S::zero(); 3]; out_dims.iter().product()];
    let eighth = S::lit(0.125);
    let half = S::lit(0.5);
    let six = S::lit(6.0);
    for k in 0..out_dims[2] {
        for j in 0..out_dims[1] {
            for i in 0..out_dims[0] {
                let p = [i, j, k];
                let q = p[axis];
                let at = |t: isize| {
                    let mut src = p;
                    src[axis] = t.clamp(0, n as isize - 1) as usize;
                    coeffs[idx(dims, src)]
                };
                let m = (q / 2) as isize;
                let v = if q % 2 == 0 {
                    let (a, b, c) = (at(m - 1), at(m), at(m + 1));
                    [0, 1, 2].map(|r| (a[r] + six * b[r] + c[r]) * eighth)
                } else {
                    let (a, b) = (at(m), at(m + 1));
                    [0, 1, 2].map(|r| (a[r] + b[r]) * half)
                };
                out[idx(out_dims, p)] = v;
            }
        }
    }
    (out, out_dims)
}
