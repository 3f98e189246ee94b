use serde::{Deserialize, Serialize};

use super::{Composite, SpatialTransform, TransformError};
use crate::scalar::{cast3, norm3, Real};
use crate::volume::Grid;

/// Displacement vectors (mm) sampled on a reference grid; between grid points the field is
/// trilinearly interpolated, outside it the nearest boundary value is used.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField<S> {
    grid: Grid,
    vectors: Vec<[S; 3]>,
}

impl<S: Real> DenseField<S> {
    pub fn new(grid: Grid, vectors: Vec<[S; 3]>) -> Result<Self, TransformError> {
        if vectors.len() != grid.len() {
            return Err(TransformError::LengthMismatch {
                expected: grid.len(),
                got: vectors.len(),
            });
        }
        Ok(Self { grid, vectors })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            vectors: vec![[S::zero(); 3]; n],
        }
    }

    /// Samples `t(x) − x` at every grid point.
    pub fn from_transform<T: SpatialTransform<S> + ?Sized>(t: &T, grid: &Grid) -> Self {
        let mut vectors = Vec::with_capacity(grid.len());
        let [nx, ny, nz] = grid.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let x: [S; 3] = cast3(grid.world_of(i, j, k));
                    let y = t.apply_point(x);
                    vectors.push([y[0] - x[0], y[1] - x[1], y[2] - x[2]]);
                }
            }
        }
        Self {
            grid: grid.clone(),
            vectors,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn vectors(&self) -> &[[S; 3]] {
        &self.vectors
    }

    pub fn displacement_at(&self, x: [S; 3]) -> [S; 3] {
        let c = self.grid.world_to_voxel(cast3(x)).0;
        let dims = self.grid.dims;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let t = c[a].clamp(0.0, hi);
            let f = if dims[a] == 1 { 0.0 } else { t.floor().min(hi - 1.0) };
            base[a] = f as usize;
            frac[a] = t - f;
        }
        let mut out = [0f64; 3];
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    let v = self.vectors[self.grid.index(base[0] + dx, base[1] + dy, base[2] + dz)];
                    for r in 0..3 {
                        out[r] += wx * wy * wz * v[r].as_f64();
                    }
                }
            }
        }
        cast3(out)
    }
}

impl<S: Real> SpatialTransform<S> for DenseField<S> {
    fn apply_point(&self, x: [S; 3]) -> [S; 3] {
        let d = self.displacement_at(x);
        [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
    }
}

/// Round-trip accuracy of a numerical inverse on the 2-voxel-eroded grid interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseStats {
    pub tolerance_mm: f64,
    pub points_checked: usize,
    pub fraction_within_tolerance: f64,
    pub max_residual_mm: f64,
    pub mean_residual_mm: f64,
    /// Grid points (whole grid) where the fixed-point iteration hit `max_iter`.
    pub unconverged_points: usize,
    /// Grid points where the forward Jacobian determinant is ≤ 0.
    pub folded_points: usize,
}

#[derive(Debug, Clone)]
pub struct Inversion<S> {
    pub field: DenseField<S>,
    pub stats: InverseStats,
}

/// Minimum share of interior points that must meet the tolerance.
const REQUIRED_FRACTION: f64 = 0.99;

/// Numerical inverse of `t` sampled on `grid`: returns `v` with `t(u + v(u)) ≈ u`.
///
/// The affine part is inverted analytically; the FFD part by the fixed-point iteration
/// `z ← u − ffd(z)` (undamped) in the affine-mapped frame, stopping once the round-trip
/// residual `‖t(t⁻¹(u)) − u‖` drops below `tol_mm / 10` or after `max_iter` sweeps.
pub fn invert<S: Real>(
    t: &Composite<S>,
    grid: &Grid,
    tol_mm: f64,
    max_iter: usize,
) -> Result<Inversion<S>, TransformError> {
    use rayon::prelude::*;

    let affine_inv = t.affine.inverse()?;
    let det_affine = t.affine.determinant().as_f64();
    let [nx, ny, nz] = grid.dims;
    let stop = S::lit(tol_mm * 0.1);

    struct Point<S> {
        v: [S; 3],
        residual: f64,
        converged: bool,
        folded: bool,
    }

    let slices: Vec<Vec<Point<S>>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let u: [S; 3] = cast3(grid.world_of(i, j, k));
                    let (y, converged) = match &t.ffd {
                        None => (affine_inv.apply(u), true),
                        Some(f) => {
                            let mut z = u;
                            let mut converged = false;
                            for _ in 0..max_iter.max(1) {
                                let d = f.displacement(z);
                                let r = [z[0] + d[0] - u[0], z[1] + d[1] - u[1], z[2] + d[2] - u[2]];
                                if norm3(r) <= stop {
                                    converged = true;
                                    break;
                                }
                                z = [u[0] - d[0], u[1] - d[1], u[2] - d[2]];
                            }
                            (affine_inv.apply(z), converged)
                        }
                    };
                    let back = t.apply_point(y);
                    let residual = norm3([back[0] - u[0], back[1] - u[1], back[2] - u[2]]).as_f64();
                    let folded = match &t.ffd {
                        None => det_affine <= 0.0,
                        Some(_) => super::affine::det3(&t.jacobian(y)).as_f64() <= 0.0,
                    };
                    out.push(Point {
                        v: [y[0] - u[0], y[1] - u[1], y[2] - u[2]],
                        residual,
                        converged,
                        folded,
                    });
                }
            }
            out
        })
        .collect();

    let erode = |d: usize, i: usize| d <= 4 || (i >= 2 && i + 2 < d);
    let mut checked = 0usize;
    let mut within = 0usize;
    let mut max_res = 0f64;
    let mut sum_res = 0f64;
    let mut unconverged = 0usize;
    let mut folded = 0usize;
    let mut vectors = Vec::with_capacity(grid.len());
    for (k, slice) in slices.into_iter().enumerate() {
        for (idx, p) in slice.into_iter().enumerate() {
            let (i, j) = (idx % nx, idx / nx);
            unconverged += usize::from(!p.converged);
            folded += usize::from(p.folded);
            if erode(nx, i) && erode(ny, j) && erode(nz, k) {
                checked += 1;
                within += usize::from(p.residual <= tol_mm);
                max_res = max_res.max(p.residual);
                sum_res += p.residual;
            }
            vectors.push(p.v);
        }
    }
    if folded > 0 {
        log::warn!("transform folds at {folded} grid points; inverse may be unreliable");
    }
    let fraction = if checked == 0 {
        1.0
    } else {
        within as f64 / checked as f64
    };
    if fraction < REQUIRED_FRACTION {
        return Err(TransformError::NonConvergence {
            worst_residual: max_res,
            fraction_within: fraction,
        });
    }
    Ok(Inversion {
        field: DenseField {
            grid: grid.clone(),
            vectors,
        },
        stats: InverseStats {
            tolerance_mm: tol_mm,
            points_checked: checked,
            fraction_within_tolerance: fraction,
            max_residual_mm: max_res,
            mean_residual_mm: if checked == 0 { 0.0 } else { sum_res / checked as f64 },
            unconverged_points: unconverged,
            folded_points: folded,
        },
    })
}
