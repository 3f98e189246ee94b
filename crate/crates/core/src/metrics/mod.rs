//! Segmentation quality metrics: Dice, volume overlap error and RMS symmetric surface distance,
//! evaluated over slices containing ground-truth bone.

mod edt;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use edt::squared_distance_transform;

use crate::prompts::StructureId;
use crate::scalar::Real;
use crate::volume::{Grid, Volume, VolumeError};

fn counts<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<(usize, usize, usize), VolumeError> {
    a.ensure_same_grid(b)?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (!x.is_zero(), !y.is_zero());
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    Ok((na, nb, both))
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<f64, VolumeError> {
    let (na, nb, both) = counts(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    })
}

/// `1 − |A∩B| / |A∪B|`, and 0 when both masks are empty.
pub fn voe<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<f64, VolumeError> {
    let (na, nb, both) = counts(a, b)?;
    let union = na + nb - both;
    Ok(if union == 0 {
        0.0
    } else {
        1.0 - both as f64 / union as f64
    })
}

/// Foreground voxels with a 6-connected background neighbour or lying on the volume boundary.
pub fn surface_voxels<T: Real>(mask: &Volume<T>) -> Vec<bool> {
    let [nx, ny, nz] = mask.dims();
    let g = mask.grid();
    let fg = |i: usize, j: usize, k: usize| !mask.get(i, j, k).is_zero();
    let mut out = vec![false; g.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !fg(i, j, k) {
                    continue;
                }
                let boundary = i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
                out[g.index(i, j, k)] = boundary
                    || !fg(i - 1, j, k)
                    || !fg(i + 1, j, k)
                    || !fg(i, j - 1, k)
                    || !fg(i, j + 1, k)
                    || !fg(i, j, k - 1)
                    || !fg(i, j, k + 1);
            }
        }
    }
    out
}

/// Root-mean-square symmetric surface distance in mm; `None` when either mask is empty.
pub fn rmsd<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<Option<f64>, VolumeError> {
    a.ensure_same_grid(b)?;
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    let (ca, cb) = (sa.iter().filter(|&&s| s).count(), sb.iter().filter(|&&s| s).count());
    if ca == 0 || cb == 0 {
        return Ok(None);
    }
    let dims = a.dims();
    let spacing = a.spacing();
    let da = squared_distance_transform(dims, spacing, &sa);
    let db = squared_distance_transform(dims, spacing, &sb);
    let mut sum = 0.0;
    for i in 0..sa.len() {
        if sa[i] {
            sum += db[i];
        }
        if sb[i] {
            sum += da[i];
        }
    }
    Ok(Some((sum / (ca + cb) as f64).sqrt()))
}

/// Slices on which the union of ground-truth femur and tibia has any foreground.
pub fn filter_slices_with_bone<T: Real>(gt: &BTreeMap<StructureId, Volume<T>>) -> Vec<usize> {
    let bones: Vec<&Volume<T>> = [StructureId::FEMUR, StructureId::TIBIA]
        .iter()
        .filter_map(|s| gt.get(s))
        .collect();
    let Some(first) = bones.first() else {
        return Vec::new();
    };
    (0..first.dims()[2])
        .filter(|&k| bones.iter().any(|v| v.slice_z(k).iter().any(|x| !x.is_zero())))
        .collect()
}

/// Stacks the listed z-slices into a new volume (origin of the first listed slice).
pub fn restrict_slices<T: Real>(v: &Volume<T>, slices: &[usize]) -> Result<Volume<T>, VolumeError> {
    let [nx, ny, _] = v.dims();
    let origin = match slices.first() {
        Some(&k) => v.grid().world_of(0, 0, k),
        None => v.origin(),
    };
    let grid = Grid::new([nx, ny, slices.len()], v.spacing(), origin)?;
    let mut data = Vec::with_capacity(grid.len());
    for &k in slices {
        data.extend_from_slice(v.slice_z(k));
    }
    Volume::new(grid, data, v.kind())
}

/// Metric values; `None` marks an undefined value (missing prediction, empty mask or no slices).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub dice: Option<f64>,
    pub voe: Option<f64>,
    pub rmsd_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub case_id: String,
    pub strategy: String,
    pub slices: Vec<usize>,
    pub structures: BTreeMap<StructureId, StructureMetrics>,
}

/// Scores every ground-truth structure over the bone-bearing slices.
pub fn evaluate_case<T: Real>(
    case_id: &str,
    strategy: &str,
    pred: &BTreeMap<StructureId, Volume<T>>,
    gt: &BTreeMap<StructureId, Volume<T>>,
) -> Result<EvaluationReport, VolumeError> {
    let slices = filter_slices_with_bone(gt);
    let mut structures = BTreeMap::new();
    for (s, truth) in gt {
        let metrics = match pred.get(s) {
            Some(p) if !slices.is_empty() => {
                let p = restrict_slices(p, &slices)?;
                let t = restrict_slices(truth, &slices)?;
                StructureMetrics {
                    dice: Some(dice(&p, &t)?),
                    voe: Some(voe(&p, &t)?),
                    rmsd_mm: rmsd(&p, &t)?,
                }
            }
            Some(p) => {
                truth.ensure_same_grid(p)?;
                StructureMetrics::default()
            }
            None => StructureMetrics::default(),
        };
        structures.insert(s.clone(), metrics);
    }
    Ok(EvaluationReport {
        case_id: case_id.to_string(),
        strategy: strategy.to_string(),
        slices,
        structures,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    case: &'a str,
    strategy: &'a str,
    structure: &'a str,
    dice: Option<f64>,
    voe: Option<f64>,
    rmsd_mm: Option<f64>,
    n_slices: usize,
}

/// One CSV row per structure; undefined values are left empty.
pub fn write_csv<W: Write>(reports: &[EvaluationReport], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for (s, m) in &r.structures {
            w.serialize(CsvRow {
                case: &r.case_id,
                strategy: &r.strategy,
                structure: s.as_str(),
                dice: m.dice,
                voe: m.voe,
                rmsd_mm: m.rmsd_mm,
                n_slices: r.slices.len(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
