//! Intensity clipping and centered crop / pad to a fixed matrix size.

use super::{Grid, Volume, VolumeError, VolumeKind};
use crate::scalar::Real;

/// Low-side offset for centering an axis of length `n` in a window of length `target`.
///
/// Positive values are voxels cropped from the low side, negative values voxels padded there.
/// When the margin is odd the extra voxel is taken from (or added to) the high side.
pub fn center_crop_offsets(n: usize, target: usize) -> isize {
    let margin = n as isize - target as isize;
    if margin >= 0 {
        margin / 2
    } else {
        -((-margin) / 2)
    }
}

/// Clips intensities to `[lo, hi]` and center-crops or zero-pads to `target_dims`.
///
/// Masks are not clipped. Padding uses `0` clamped into the clip window so the output
/// range invariant holds. Idempotent for fixed parameters.
pub fn preprocess<T: Real>(v: &Volume<T>, target_dims: [usize; 3], clip: (f64, f64)) -> Result<Volume<T>, VolumeError> {
    let (lo, hi) = clip;
    if !(lo < hi) {
        return Err(VolumeError::InvalidParameters(format!(
            "clip lower bound {lo} must be below upper bound {hi}"
        )));
    }
    if target_dims.contains(&0) {
        return Err(VolumeError::InvalidParameters(format!(
            "target dims {target_dims:?} must be positive"
        )));
    }
    let clamp = |x: f64| -> T {
        if v.kind() == VolumeKind::Mask {
            T::lit(x)
        } else {
            T::lit(x.clamp(lo, hi))
        }
    };
    let pad = clamp(0.0);
    let dims = v.dims();
    let offsets = [0, 1, 2].map(|a| center_crop_offsets(dims[a], target_dims[a]));
    let spacing = v.spacing();
    let origin = [0, 1, 2].map(|a| v.origin()[a] + offsets[a] as f64 * spacing[a]);
    let grid = Grid::new(target_dims, spacing, origin)?;
    Volume::from_fn(grid, v.kind(), |i, j, k| {
        let src = [i, j, k]
            .iter()
            .zip(offsets)
            .map(|(&o, off)| o as isize + off)
            .collect::<Vec<_>>();
        if (0..3).all(|a| src[a] >= 0 && (src[a] as usize) < dims[a]) {
            clamp(v.get(src[0] as usize, src[1] as usize, src[2] as usize).as_f64())
        } else {
            pad
        }
    })
}
