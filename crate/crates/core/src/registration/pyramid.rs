use crate::volume::{Grid, Volume};

/// Axes shorter than this are left at full resolution.
const MIN_AXIS_TO_HALVE: usize = 8;

/// 2×2×2 box average followed by decimation. The new voxel centers sit at the block centers.
pub(crate) fn halve(v: &Volume<f64>) -> Volume<f64> {
    let dims = v.dims();
    let factor = dims.map(|d| if d >= MIN_AXIS_TO_HALVE { 2 } else { 1 });
    let out_dims = [0, 1, 2].map(|a| dims[a] / factor[a]);
    let spacing = [0, 1, 2].map(|a| v.spacing()[a] * factor[a] as f64);
    let origin = [0, 1, 2].map(|a| v.origin()[a] + 0.5 * (factor[a] - 1) as f64 * v.spacing()[a]);
    let grid = Grid::new(out_dims, spacing, origin).expect("halved grid stays valid");
    let norm = 1.0 / (factor[0] * factor[1] * factor[2]) as f64;
    Volume::from_fn(grid, v.kind(), |i, j, k| {
        let mut acc = 0.0;
        for dk in 0..factor[2] {
            for dj in 0..factor[1] {
                for di in 0..factor[0] {
                    acc += v.get(factor[0] * i + di, factor[1] * j + dj, factor[2] * k + dk);
                }
            }
        }
        acc * norm
    })
    .expect("intensity volume")
}

/// Coarse-to-fine pyramid; the last entry is the input itself.
pub(crate) fn build(v: Volume<f64>, levels: usize) -> Vec<Volume<f64>> {
    let mut out = vec![v];
    for _ in 1..levels {
        let next = halve(out.last().unwrap());
        out.push(next);
    }
    out.reverse();
    out
}
