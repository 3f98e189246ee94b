//! 3D volumes, their geometry, interpolation and resampling.

mod io;
mod preprocess;

pub use io::{load_dense_field, load_volume, save_dense_field, save_volume, VolumeFormat, NIFTI_HEADER_SIZE};
pub use preprocess::{center_crop_offsets, preprocess};

use serde::{Deserialize, Serialize};

use crate::scalar::{cast3, Real};
use crate::transform::SpatialTransform;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("data length {got} does not match dims {dims:?} ({expected} voxels)")]
    LengthMismatch {
        dims: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("invalid dims {0:?}: every axis must be positive")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0:?}: components must be finite and > 0")]
    InvalidSpacing([f64; 3]),
    #[error("invalid origin {0:?}")]
    InvalidOrigin([f64; 3]),
    #[error("mask contains non-binary value {value} at index {index}")]
    NonBinaryMask { index: usize, value: f64 },
    #[error("grids differ: {0:?} vs {1:?}")]
    GridMismatch(Box<Grid>, Box<Grid>),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported datatype: {0}")]
    UnsupportedDatatype(String),
    #[error("invalid preprocessing parameters: {0}")]
    InvalidParameters(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    #[serde(alias = "binary-mask")]
    Mask,
}

/// Continuous voxel-index coordinate `(u, v, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VoxelCoord(pub [f64; 3]);

impl VoxelCoord {
    pub fn new(u: f64, v: f64, w: f64) -> Self {
        Self([u, v, w])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    /// Integer voxel the coordinate falls in (round half away from zero).
    pub fn nearest_index(&self) -> [i64; 3] {
        [
            self.0[0].round() as i64,
            self.0[1].round() as i64,
            self.0[2].round() as i64,
        ]
    }
}

/// Sampling lattice: voxel `(i, j, k)` sits at world position `origin + (i, j, k) * spacing` (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        let grid = Self { dims, spacing, origin };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.dims.contains(&0) {
            return Err(VolumeError::InvalidDims(self.dims));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(VolumeError::InvalidSpacing(self.spacing));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidOrigin(self.origin));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of voxel `(i, j, k)`, x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords_of(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn voxel_to_world(&self, c: VoxelCoord) -> [f64; 3] {
        let c = c.0;
        [
            self.origin[0] + c[0] * self.spacing[0],
            self.origin[1] + c[1] * self.spacing[1],
            self.origin[2] + c[2] * self.spacing[2],
        ]
    }

    #[inline]
    pub fn world_to_voxel(&self, x: [f64; 3]) -> VoxelCoord {
        VoxelCoord([
            (x[0] - self.origin[0]) / self.spacing[0],
            (x[1] - self.origin[1]) / self.spacing[1],
            (x[2] - self.origin[2]) / self.spacing[2],
        ])
    }

    /// World position of the integer voxel `(i, j, k)`.
    #[inline]
    pub fn world_of(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Physical extent between the first and last voxel centers.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn center(&self) -> [f64; 3] {
        let e = self.extent();
        [0, 1, 2].map(|a| self.origin[a] + 0.5 * e[a])
    }

    /// True when the coordinate rounds to a voxel inside the grid.
    pub fn contains(&self, c: VoxelCoord) -> bool {
        c.is_finite()
            && (0..3).all(|a| {
                let r = c.0[a].round();
                r >= 0.0 && r < self.dims[a] as f64
            })
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutOfBounds {
    /// Samples outside the array read as zero (trilinear: zero padding per neighbour).
    Zero,
    /// Coordinates are clamped onto the array before interpolation.
    Clamp,
}

/// Scalar 3D image. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    data: Vec<T>,
    kind: VolumeKind,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>, kind: VolumeKind) -> Result<Self, VolumeError> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                dims: grid.dims,
                expected: grid.len(),
                got: data.len(),
            });
        }
        if kind == VolumeKind::Mask {
            if let Some((index, v)) = data
                .iter()
                .enumerate()
                .find(|(_, v)| **v != T::zero() && **v != T::one())
            {
                return Err(VolumeError::NonBinaryMask {
                    index,
                    value: v.as_f64(),
                });
            }
        }
        Ok(Self { grid, data, kind })
    }

    pub fn zeros(grid: Grid, kind: VolumeKind) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![T::zero(); n],
            kind,
        }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        grid: Grid,
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self, VolumeError> {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(grid, data, kind)
    }

    /// Binary mask from a predicate over voxel indices.
    pub fn mask_from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        Self::from_fn(
            grid,
            VolumeKind::Mask,
            |i, j, k| {
                if f(i, j, k) {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
        .expect("predicate output is binary")
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    #[inline]
    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    #[inline]
    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn is_mask(&self) -> bool {
        self.kind == VolumeKind::Mask
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != T::zero()).count()
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    /// Pixels of slice `k` in row-major (x fastest) order.
    pub fn slice_z(&self, k: usize) -> &[T] {
        let n = self.grid.dims[0] * self.grid.dims[1];
        &self.data[k * n..(k + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            kind: self.kind,
        }
    }

    /// Same geometry and kind, new values. Mask binarity is re-checked.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self, VolumeError> {
        Self::new(self.grid.clone(), data, self.kind)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self, VolumeError> {
        self.with_data(self.data.iter().map(|v| f(*v)).collect())
    }

    /// Reinterprets the volume as a mask (`v != 0` ⇒ 1).
    pub fn binarized(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            data: self
                .data
                .iter()
                .map(|v| if *v != T::zero() { T::one() } else { T::zero() })
                .collect(),
            kind: VolumeKind::Mask,
        }
    }

    pub fn same_grid<U>(&self, other: &Volume<U>) -> bool {
        self.grid == other.grid
    }

    pub fn ensure_same_grid<U>(&self, other: &Volume<U>) -> Result<(), VolumeError> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(VolumeError::GridMismatch(
                Box::new(self.grid.clone()),
                Box::new(other.grid.clone()),
            ))
        }
    }

    /// Interpolated value at a continuous voxel coordinate.
    pub fn sample(&self, c: VoxelCoord, interp: Interpolation, oob: OutOfBounds) -> T {
        sample(self, c, interp, oob)
    }
}

/// Interpolated value of `v` at voxel coordinate `c`. Total for finite `c`; non-finite
/// coordinates read as zero.
pub fn sample<T: Real>(v: &Volume<T>, c: VoxelCoord, interp: Interpolation, oob: OutOfBounds) -> T {
    if !c.is_finite() {
        return T::zero();
    }
    let dims = v.grid.dims;
    let mut c = c.0;
    if oob == OutOfBounds::Clamp {
        for a in 0..3 {
            c[a] = c[a].clamp(0.0, (dims[a] - 1) as f64);
        }
    }
    match interp {
        Interpolation::Nearest => {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let r = c[a].round();
                if r < 0.0 || r >= dims[a] as f64 {
                    return T::zero();
                }
                idx[a] = r as usize;
            }
            v.get(idx[0], idx[1], idx[2])
        }
        Interpolation::Trilinear => {
            let mut base = [0i64; 3];
            let mut frac = [0f64; 3];
            for a in 0..3 {
                let f = c[a].floor();
                base[a] = f as i64;
                frac[a] = c[a] - f;
            }
            let fetch = |i: i64, j: i64, k: i64| -> f64 {
                if i < 0 || j < 0 || k < 0 || i >= dims[0] as i64 || j >= dims[1] as i64 || k >= dims[2] as i64 {
                    0.0
                } else {
                    v.get(i as usize, j as usize, k as usize).as_f64()
                }
            };
            let mut acc = 0.0;
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
                        acc += wx * wy * wz * fetch(base[0] + dx, base[1] + dy, base[2] + dz);
                    }
                }
            }
            T::lit(acc)
        }
    }
}

/// Trilinear value and voxel-space gradient over raw `f64` data, or `None` when `c` lies
/// outside the image's physical extent `[-0.5, n-0.5]` on any axis. Within the outer half
/// voxel the edge value is held constant, so that axis contributes zero gradient; single-voxel
/// axes likewise contribute zero gradient.
#[inline]
pub(crate) fn trilinear_with_gradient(data: &[f64], dims: [usize; 3], c: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    let mut step = [0usize; 3];
    let strides = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        if !(c[a] >= -0.5 && c[a] <= hi + 0.5) {
            return None;
        }
        if dims[a] == 1 || c[a] < 0.0 || c[a] > hi {
            base[a] = if c[a] > hi { dims[a] - 1 } else { 0 };
            frac[a] = 0.0;
            step[a] = 0;
        } else {
            let f = c[a].floor().min(hi - 1.0);
            base[a] = f as usize;
            frac[a] = c[a] - f;
            step[a] = strides[a];
        }
    }
    let i0 = base[0] + strides[1] * base[1] + strides[2] * base[2];
    let (sx, sy, sz) = (step[0], step[1], step[2]);
    let c000 = data[i0];
    let c100 = data[i0 + sx];
    let c010 = data[i0 + sy];
    let c110 = data[i0 + sx + sy];
    let c001 = data[i0 + sz];
    let c101 = data[i0 + sx + sz];
    let c011 = data[i0 + sy + sz];
    let c111 = data[i0 + sx + sy + sz];
    let [fx, fy, fz] = frac;
    let gx = 1.0 - fx;
    let gy = 1.0 - fy;
    let gz = 1.0 - fz;
    // interpolate along x first
    let c00 = c000 * gx + c100 * fx;
    let c10 = c010 * gx + c110 * fx;
    let c01 = c001 * gx + c101 * fx;
    let c11 = c011 * gx + c111 * fx;
    let c0 = c00 * gy + c10 * fy;
    let c1 = c01 * gy + c11 * fy;
    let value = c0 * gz + c1 * fz;

    let dz = if sz == 0 { 0.0 } else { c1 - c0 };
    let dy = if sy == 0 {
        0.0
    } else {
        (c10 - c00) * gz + (c11 - c01) * fz
    };
    let dx = if sx == 0 {
        0.0
    } else {
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        (d00 * gy + d10 * fy) * gz + (d01 * gy + d11 * fy) * fz
    };
    Some((value, [dx, dy, dz]))
}

/// Resamples `moving` onto `grid_of`: `out(u) = moving(t(world(u)))`.
///
/// `t` maps `grid_of` world coordinates into `moving` world coordinates. Masks are always
/// resampled with nearest-neighbour interpolation so the output stays binary; samples falling
/// outside `moving` read as zero.
pub fn resample_through<T, S, M>(moving: &Volume<T>, grid_of: &Grid, t: &M, interp: Interpolation) -> Volume<T>
where
    T: Real,
    S: Real,
    M: SpatialTransform<S> + Sync + ?Sized,
{
    use rayon::prelude::*;

    let interp = if moving.is_mask() {
        Interpolation::Nearest
    } else {
        interp
    };
    let [nx, ny, nz] = grid_of.dims;
    let slices: Vec<Vec<T>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let x: [S; 3] = cast3(grid_of.world_of(i, j, k));
                    let y = cast3(t.apply_point(x));
                    let c = moving.grid.world_to_voxel(y);
                    out.push(sample(moving, c, interp, OutOfBounds::Zero));
                }
            }
            out
        })
        .collect();
    Volume {
        grid: grid_of.clone(),
        data: slices.into_iter().flatten().collect(),
        kind: moving.kind,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::Affine;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3]) -> Volume<f32> {
        let grid = Grid::new(dims, [1.0, 1.0, 1.0], [0.0; 3]).unwrap();
        Volume::from_fn(grid, VolumeKind::Intensity, |i, j, k| {
            (i * 7 + j * 13 + k * 29) as f32 % 17.0
        })
        .unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        let grid = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(
            Volume::<f32>::new(grid.clone(), vec![0.0; 7], VolumeKind::Intensity),
            Err(VolumeError::LengthMismatch { .. })
        ));
        let mut d = vec![0.0f32; 8];
        d[3] = 0.5;
        assert!(matches!(
            Volume::new(grid, d, VolumeKind::Mask),
            Err(VolumeError::NonBinaryMask { index: 3, .. })
        ));
        assert!(Grid::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Grid::new([2, 0, 2], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn sample_at_integer_coordinate_returns_voxel() {
        let v = ramp([5, 5, 3]);
        for interp in [Interpolation::Trilinear, Interpolation::Nearest] {
            let s = v.sample(VoxelCoord::new(2.0, 3.0, 1.0), interp, OutOfBounds::Zero);
            assert_eq!(s, v.get(2, 3, 1));
        }
    }

    #[test]
    fn trilinear_midpoint() {
        let grid = Grid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::new(grid, vec![0.0f32, 10.0], VolumeKind::Intensity).unwrap();
        let s = v.sample(
            VoxelCoord::new(0.5, 0.0, 0.0),
            Interpolation::Trilinear,
            OutOfBounds::Zero,
        );
        assert_eq!(s, 5.0);
    }

    #[test]
    fn out_of_bounds_policies() {
        let v = ramp([4, 4, 4]).map(|x| x + 1.0).unwrap();
        let far = VoxelCoord::new(-5.0, -5.0, -5.0);
        assert_eq!(v.sample(far, Interpolation::Trilinear, OutOfBounds::Zero), 0.0);
        assert_eq!(v.sample(far, Interpolation::Nearest, OutOfBounds::Zero), 0.0);
        assert_eq!(
            v.sample(far, Interpolation::Trilinear, OutOfBounds::Clamp),
            v.get(0, 0, 0)
        );
    }

    #[test]
    fn gradient_sampler_agrees_with_sample() {
        let v = ramp([6, 5, 4]).cast::<f64>();
        let c = [2.3, 1.7, 2.2];
        let (val, g) = trilinear_with_gradient(v.data(), v.dims(), c).unwrap();
        let s = v.sample(VoxelCoord(c), Interpolation::Trilinear, OutOfBounds::Zero);
        assert!((val - s).abs() < 1e-12);
        let h = 1e-6;
        for a in 0..3 {
            let mut p = c;
            let mut m = c;
            p[a] += h;
            m[a] -= h;
            let fd = (trilinear_with_gradient(v.data(), v.dims(), p).unwrap().0
                - trilinear_with_gradient(v.data(), v.dims(), m).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", g[a]);
        }
        assert!(trilinear_with_gradient(v.data(), v.dims(), [5.5, 4.0, 3.0]).is_some());
        assert!(trilinear_with_gradient(v.data(), v.dims(), [5.51, 4.0, 3.0]).is_none());
        let (edge, g) = trilinear_with_gradient(v.data(), v.dims(), [5.3, -0.4, 1.5]).unwrap();
        let held = v.sample(VoxelCoord([5.0, 0.0, 1.5]), Interpolation::Trilinear, OutOfBounds::Zero);
        assert!((edge - held).abs() < 1e-12);
        assert_eq!((g[0], g[1]), (0.0, 0.0));
    }

    #[test]
    fn resample_identity_is_identity() {
        let v = ramp([6, 5, 4]);
        let out = resample_through(&v, v.grid(), &Affine::<f64>::identity(), Interpolation::Trilinear);
        assert_eq!(out, v);
    }

    #[test]
    fn resample_translation_matches_shifted_copy() {
        let v = ramp([8, 5, 4]);
        let t = Affine::<f64>::translation([2.0, 0.0, 0.0]);
        let out = resample_through(&v, v.grid(), &t, Interpolation::Trilinear);
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..8 {
                    let expected = if i + 2 < 8 { v.get(i + 2, j, k) } else { 0.0 };
                    assert_eq!(out.get(i, j, k), expected);
                }
            }
        }
    }

    #[test]
    fn mask_resampling_stays_binary() {
        let grid = Grid::new([9, 9, 5], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let m = Volume::<f32>::mask_from_fn(grid.clone(), |i, j, _| (i + j) % 3 == 0);
        let mut t = Affine::<f64>::rotation_about([0.2, -0.1, 0.3], grid.center());
        t.translation[0] += 0.37;
        let out = resample_through(&m, &grid, &t, Interpolation::Trilinear);
        assert!(out.is_mask());
        assert!(out.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    proptest! {
        #[test]
        fn trilinear_is_lipschitz(
            u in 0.0f64..4.0, v in 0.0f64..3.0, w in 0.0f64..2.0,
            e in prop::array::uniform3(-1e-3f64..1e-3),
        ) {
            let vol = ramp([5, 4, 3]);
            // per-axis slope is bounded by the data range (0..16)
            let bound = 16.0 * (e[0].abs() + e[1].abs() + e[2].abs()) + 1e-4;
            let a = vol.sample(VoxelCoord::new(u, v, w), Interpolation::Trilinear, OutOfBounds::Zero);
            let b = vol.sample(
                VoxelCoord::new(u + e[0], v + e[1], w + e[2]),
                Interpolation::Trilinear,
                OutOfBounds::Clamp,
            );
            prop_assert!(((a - b) as f64).abs() <= bound);
        }
    }
}
