//! SSD objectives with analytic gradients for the affine and FFD stages.
//!
//! Both objectives operate on `f64` volumes that have already been prescaled. The overlap set
//! Ω contains fixed voxels whose mapped point lands inside the moving image (within half a
//! voxel of its outer voxel centers, where the edge value is held); voxels outside Ω
//! contribute to neither the sum nor the count.

use rayon::prelude::*;

use super::config::AffineDof;
use crate::transform::{mat_mul, mat_vec, Affine, Ffd};
use crate::volume::{trilinear_with_gradient, Grid, Volume};

type Mat3 = [[f64; 3]; 3];

#[derive(Default, Clone, Copy)]
struct AffineAccum {
    sum: f64,
    count: usize,
    eg: [f64; 3],
    egx: Mat3,
}

/// Maps a world point of `moving` to its continuous voxel coordinates.
#[inline]
fn to_voxel(grid: &Grid, y: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| (y[a] - grid.origin[a]) / grid.spacing[a])
}

/// Image SSD under an affine map parameterized about a fixed center.
///
/// Parameters are preconditioned: angles, log-scales and matrix entries are multiplied by
/// `radius` (mm) so a unit change of any parameter moves points by roughly one millimetre.
pub struct AffineObjective<'a> {
    fixed: &'a Volume<f64>,
    moving: &'a Volume<f64>,
    dof: AffineDof,
    center: [f64; 3],
    radius: f64,
}

impl<'a> AffineObjective<'a> {
    pub fn new(fixed: &'a Volume<f64>, moving: &'a Volume<f64>, dof: AffineDof, center: [f64; 3], radius: f64) -> Self {
        Self {
            fixed,
            moving,
            dof,
            center,
            radius,
        }
    }

    pub fn n_params(&self) -> usize {
        match self.dof {
            AffineDof::RigidScale => 9,
            AffineDof::Full => 12,
        }
    }

    /// Parameter vector of the identity transform.
    pub fn identity_params(&self) -> Vec<f64> {
        match self.dof {
            AffineDof::RigidScale => vec![0.0; 9],
            AffineDof::Full => {
                let mut p = vec![0.0; 12];
                for d in 0..3 {
                    p[4 * d] = self.radius;
                }
                p
            }
        }
    }

    /// Linear part and its derivatives with respect to each linear parameter (unscaled).
    fn linear_part(&self, q: &[f64]) -> (Mat3, Vec<Mat3>) {
        let r = self.radius;
        match self.dof {
            AffineDof::RigidScale => {
                let ang = [q[0] / r, q[1] / r, q[2] / r];
                let sc = [q[3] / r, q[4] / r, q[5] / r].map(f64::exp);
                let (sa, ca) = ang[0].sin_cos();
                let (sb, cb) = ang[1].sin_cos();
                let (sg, cg) = ang[2].sin_cos();
                let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
                let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
                let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
                let drx = [[0.0, 0.0, 0.0], [0.0, -sa, -ca], [0.0, ca, -sa]];
                let dry = [[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]];
                let drz = [[-sg, -cg, 0.0], [cg, -sg, 0.0], [0.0, 0.0, 0.0]];
                let s = [[sc[0], 0.0, 0.0], [0.0, sc[1], 0.0], [0.0, 0.0, sc[2]]];
                let rot = mat_mul(&rz, &mat_mul(&ry, &rx));
                let m = mat_mul(&rot, &s);
                let mut d = vec![
                    mat_mul(&rz, &mat_mul(&ry, &mat_mul(&drx, &s))),
                    mat_mul(&rz, &mat_mul(&dry, &mat_mul(&rx, &s))),
                    mat_mul(&drz, &mat_mul(&ry, &mat_mul(&rx, &s))),
                ];
                for a in 0..3 {
                    let mut ds = [[0.0; 3]; 3];
                    for row in 0..3 {
                        ds[row][a] = rot[row][a] * sc[a];
                    }
                    d.push(ds);
                }
                (m, d)
            }
            AffineDof::Full => {
                let mut m = [[0.0; 3]; 3];
                let mut d = Vec::with_capacity(9);
                for e in 0..9 {
                    m[e / 3][e % 3] = q[e] / r;
                    let mut de = [[0.0; 3]; 3];
                    de[e / 3][e % 3] = 1.0;
                    d.push(de);
                }
                (m, d)
            }
        }
    }

    /// Affine transform for parameter vector `q`.
    pub fn affine(&self, q: &[f64]) -> Affine<f64> {
        let (m, _) = self.linear_part(q);
        let n_lin = self.n_params() - 3;
        let t = [q[n_lin], q[n_lin + 1], q[n_lin + 2]];
        let mc = mat_vec(&m, self.center);
        Affine {
            matrix: m,
            translation: [0, 1, 2].map(|a| self.center[a] + t[a] - mc[a]),
        }
    }

    fn accumulate(&self, affine: &Affine<f64>, want_grad: bool) -> AffineAccum {
        let fg = self.fixed.grid();
        let mg = self.moving.grid();
        let [nx, ny, nz] = fg.dims;
        let mdims = mg.dims;
        let mdata = self.moving.data();
        let fdata = self.fixed.data();
        let inv_sp = mg.spacing.map(|s| 1.0 / s);
        let parts: Vec<AffineAccum> = (0..nz)
            .into_par_iter()
            .map(|k| {
                let mut acc = AffineAccum::default();
                for j in 0..ny {
                    for i in 0..nx {
                        let x = fg.world_of(i, j, k);
                        let y = affine.apply(x);
                        let Some((m, g)) = trilinear_with_gradient(mdata, mdims, to_voxel(mg, y)) else {
                            continue;
                        };
                        let e = m - fdata[fg.index(i, j, k)];
                        acc.sum += e * e;
                        acc.count += 1;
                        if want_grad {
                            let dx = [0, 1, 2].map(|a| x[a] - self.center[a]);
                            for r in 0..3 {
                                let eg = e * g[r] * inv_sp[r];
                                acc.eg[r] += eg;
                                for c in 0..3 {
                                    acc.egx[r][c] += eg * dx[c];
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = AffineAccum::default();
        for p in parts {
            total.sum += p.sum;
            total.count += p.count;
            for r in 0..3 {
                total.eg[r] += p.eg[r];
                for c in 0..3 {
                    total.egx[r][c] += p.egx[r][c];
                }
            }
        }
        total
    }

    /// Mean squared difference over Ω, or `None` when Ω is empty.
    pub fn value(&self, q: &[f64]) -> Option<f64> {
        let acc = self.accumulate(&self.affine(q), false);
        (acc.count > 0).then(|| acc.sum / acc.count as f64)
    }

    pub fn value_and_gradient(&self, q: &[f64]) -> Option<(f64, Vec<f64>)> {
        let acc = self.accumulate(&self.affine(q), true);
        if acc.count == 0 {
            return None;
        }
        let n = acc.count as f64;
        let (_, dm) = self.linear_part(q);
        let mut grad = Vec::with_capacity(self.n_params());
        for d in &dm {
            let mut s = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    s += d[r][c] * acc.egx[r][c];
                }
            }
            grad.push(2.0 * s / n / self.radius);
        }
        grad.extend(acc.eg.map(|v| 2.0 * v / n));
        Some((acc.sum / n, grad))
    }

    /// Largest first-order point motion (mm) at the fixed-grid corners for a unit step along `dir`.
    pub fn motion(&self, q: &[f64], dir: &[f64]) -> f64 {
        let (_, dm) = self.linear_part(q);
        let n_lin = dm.len();
        let mut lin = [[0.0; 3]; 3];
        for (k, d) in dm.iter().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    lin[r][c] += d[r][c] * dir[k] / self.radius;
                }
            }
        }
        let dt = [dir[n_lin], dir[n_lin + 1], dir[n_lin + 2]];
        let fg = self.fixed.grid();
        let mut worst: f64 = 0.0;
        for corner in 0..8 {
            let idx = [0, 1, 2].map(|a| if corner >> a & 1 == 1 { fg.dims[a] - 1 } else { 0 });
            let x = fg.world_of(idx[0], idx[1], idx[2]);
            let v = mat_vec(&lin, [0, 1, 2].map(|a| x[a] - self.center[a]));
            let m = [0, 1, 2].map(|a| v[a] + dt[a]);
            worst = worst.max((m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt());
        }
        worst
    }
}

/// `SSD(fixed, moving ∘ (A + ffd∘A)) + bending_weight · BE(ffd)` over flattened control displacements.
pub struct FfdObjective<'a> {
    fixed: &'a Volume<f64>,
    moving: &'a Volume<f64>,
    affine: Affine<f64>,
    lattice: Ffd<f64>,
    bending_weight: f64,
}

impl<'a> FfdObjective<'a> {
    /// `lattice` supplies geometry only; its coefficients are ignored.
    pub fn new(
        fixed: &'a Volume<f64>,
        moving: &'a Volume<f64>,
        affine: Affine<f64>,
        lattice: &Ffd<f64>,
        bending_weight: f64,
    ) -> Self {
        Self {
            fixed,
            moving,
            affine,
            lattice: lattice.clone(),
            bending_weight,
        }
    }

    pub fn n_params(&self) -> usize {
        3 * self.lattice.len()
    }

    /// Lattice carrying the flattened coefficient vector `x` (`[dx, dy, dz]` per knot).
    pub fn lattice_with(&self, x: &[f64]) -> Ffd<f64> {
        let coeffs = x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        self.lattice
            .with_coeffs(coeffs)
            .expect("coefficient count matches lattice")
    }

    fn similarity(&self, ffd: &Ffd<f64>, want_grad: bool) -> Option<(f64, Option<Vec<f64>>)> {
        let fg = self.fixed.grid();
        let mg = self.moving.grid();
        let [nx, ny, nz] = fg.dims;
        let mdims = mg.dims;
        let mdata = self.moving.data();
        let fdata = self.fixed.data();
        let inv_sp = mg.spacing.map(|s| 1.0 / s);
        let [lx, ly, _] = ffd.dims();
        let n_par = 3 * ffd.len();
        let parts: Vec<(f64, usize, Option<Vec<f64>>)> = (0..nz)
            .into_par_iter()
            .map(|k| {
                let mut sum = 0.0;
                let mut count = 0usize;
                let mut grad = want_grad.then(|| vec![0.0; n_par]);
                for j in 0..ny {
                    for i in 0..nx {
                        let a = self.affine.apply(fg.world_of(i, j, k));
                        let st = ffd.stencil(a);
                        let d = ffd.displacement_with(&st);
                        let y = [a[0] + d[0], a[1] + d[1], a[2] + d[2]];
                        let Some((m, g)) = trilinear_with_gradient(mdata, mdims, to_voxel(mg, y)) else {
                            continue;
                        };
                        let e = m - fdata[fg.index(i, j, k)];
                        sum += e * e;
                        count += 1;
                        if let Some(grad) = grad.as_mut() {
                            let eg = [0, 1, 2].map(|r| e * g[r] * inv_sp[r]);
                            for n in 0..4 {
                                let wz = st.weight[2][n];
                                let oz = st.index[2][n] * lx * ly;
                                for mm in 0..4 {
                                    let wyz = st.weight[1][mm] * wz;
                                    let oyz = oz + st.index[1][mm] * lx;
                                    for l in 0..4 {
                                        let w = st.weight[0][l] * wyz;
                                        let o = 3 * (oyz + st.index[0][l]);
                                        grad[o] += w * eg[0];
                                        grad[o + 1] += w * eg[1];
                                        grad[o + 2] += w * eg[2];
                                    }
                                }
                            }
                        }
                    }
                }
                (sum, count, grad)
            })
            .collect();
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut grad = want_grad.then(|| vec![0.0; n_par]);
        for (s, c, g) in parts {
            sum += s;
            count += c;
            if let (Some(total), Some(g)) = (grad.as_mut(), g) {
                for (t, v) in total.iter_mut().zip(g) {
                    *t += v;
                }
            }
        }
        if count == 0 {
            return None;
        }
        let n = count as f64;
        if let Some(g) = grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= 2.0 / n);
        }
        Some((sum / n, grad))
    }

    /// Image term alone (no bending penalty).
    pub fn ssd(&self, x: &[f64]) -> Option<f64> {
        self.similarity(&self.lattice_with(x), false).map(|(s, _)| s)
    }

    pub fn value(&self, x: &[f64]) -> Option<f64> {
        let ffd = self.lattice_with(x);
        let (s, _) = self.similarity(&ffd, false)?;
        Some(s + self.bending_weight * ffd.bending_energy())
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let ffd = self.lattice_with(x);
        let (s, grad) = self.similarity(&ffd, true)?;
        let mut grad = grad.unwrap();
        let mut value = s;
        if self.bending_weight > 0.0 {
            value += self.bending_weight * ffd.bending_energy();
            for (k, b) in ffd.bending_energy_gradient().iter().enumerate() {
                for a in 0..3 {
                    grad[3 * k + a] += self.bending_weight * b[a];
                }
            }
        }
        Some((value, grad))
    }

    /// Largest displacement change (mm) for a unit step along `dir`; B-spline weights sum to one.
    pub fn motion(&self, dir: &[f64]) -> f64 {
        dir.chunks_exact(3)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .fold(0.0, f64::max)
    }
}
