//! Synthetic knee phantoms: two ellipsoidal bones with cartilage caps facing a joint gap,
//! optional known deformations, noisy intensities, exact masks and default prompts.

mod prompts;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{PromptSet, StructureId};
use crate::transform::{Affine, Composite, Ffd, SpatialTransform};
use crate::volume::{Grid, Volume, VolumeError, VolumeKind};

pub use prompts::default_prompts;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("degenerate phantom geometry: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Transform(#[from] crate::transform::TransformError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartilageSpec {
    pub structure: StructureId,
    pub thickness_mm: f64,
    pub intensity: f64,
    /// +1 caps the +y side of the bone, −1 the −y side.
    pub side: f64,
    /// Shell points qualify when `side·(y − c_y)/r_y` exceeds this.
    pub cap_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoneSpec {
    pub structure: StructureId,
    /// Center in world mm.
    pub center: [f64; 3],
    pub radii_mm: [f64; 3],
    pub intensity: f64,
    pub cartilage: Option<CartilageSpec>,
}

/// Known deformation mapping patient coordinates to template coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationSpec {
    pub translation_mm: [f64; 3],
    pub rotation_deg: [f64; 3],
    pub scale: [f64; 3],
    /// Largest FFD displacement over the grid; 0 disables the FFD part.
    pub ffd_amplitude_mm: f64,
    pub ffd_spacing_mm: f64,
}

impl Default for DeformationSpec {
    fn default() -> Self {
        Self {
            translation_mm: [0.0; 3],
            rotation_deg: [0.0; 3],
            scale: [1.0; 3],
            ffd_amplitude_mm: 0.0,
            ffd_spacing_mm: 32.0,
        }
    }
}

/// Ranges from which random patient deformations are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationBounds {
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub ffd_amplitude_mm: f64,
    pub ffd_spacing_mm: f64,
}

impl Default for DeformationBounds {
    fn default() -> Self {
        Self {
            max_translation_mm: 4.0,
            max_rotation_deg: 5.0,
            scale_range: [0.95, 1.05],
            ffd_amplitude_mm: 3.0,
            ffd_spacing_mm: 32.0,
        }
    }
}

impl DeformationSpec {
    pub fn random(rng: &mut impl Rng, b: &DeformationBounds) -> Self {
        let t = b.max_translation_mm;
        let r = b.max_rotation_deg;
        let [lo, hi] = b.scale_range;
        let s = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        Self {
            translation_mm: [0; 3].map(|_| if t > 0.0 { rng.gen_range(-t..t) } else { 0.0 }),
            rotation_deg: [0; 3].map(|_| if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 }),
            scale: [s; 3],
            ffd_amplitude_mm: b.ffd_amplitude_mm,
            ffd_spacing_mm: b.ffd_spacing_mm,
        }
    }

    /// Realizes the map about the grid center. FFD coefficients are drawn from `rng` and
    /// rescaled so the largest displacement over the grid voxels equals the amplitude.
    pub fn realize(&self, grid: &Grid, rng: &mut impl Rng) -> Result<Composite<f64>, PhantomError> {
        let c = grid.center();
        let rad = self.rotation_deg.map(f64::to_radians);
        let affine = Affine::translation(self.translation_mm)
            .after(&Affine::rotation_about(rad, c))
            .after(&Affine::scaling_about(self.scale, c));
        affine.check_invertible()?;
        if self.ffd_amplitude_mm <= 0.0 {
            return Ok(Composite::from_affine(affine));
        }
        let lattice = Ffd::<f64>::covering(grid, [self.ffd_spacing_mm; 3])?;
        let raw: Vec<[f64; 3]> = (0..lattice.len())
            .map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let lattice = lattice.with_coeffs(raw)?;
        let mut peak: f64 = 0.0;
        for idx in 0..grid.len() {
            let [i, j, k] = grid.coords_of(idx);
            let d = lattice.displacement(affine.apply(grid.world_of(i, j, k)));
            peak = peak.max(crate::scalar::norm3(d));
        }
        if peak == 0.0 {
            return Ok(Composite::from_affine(affine));
        }
        let s = self.ffd_amplitude_mm / peak;
        let coeffs = lattice.coeffs().iter().map(|c| c.map(|v| v * s)).collect();
        Ok(Composite::with_ffd(affine, lattice.with_coeffs(coeffs)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub bones: Vec<BoneSpec>,
    pub background: f64,
    pub noise_sigma: f64,
    /// Sub-samples per axis for partial-volume intensities; 1 gives crisp voxel-center labels.
    pub supersample: usize,
    pub deformation: Option<DeformationSpec>,
}

impl Default for PhantomSpec {
    /// 128×128×24 knee at 1×1×2 mm: femur above, tibia below, 3 mm cartilage caps facing the gap.
    fn default() -> Self {
        let cap = |structure, side| CartilageSpec {
            structure,
            thickness_mm: 3.0,
            intensity: 1500.0,
            side,
            cap_threshold: 0.35,
        };
        Self {
            dims: [128, 128, 24],
            spacing: [1.0, 1.0, 2.0],
            origin: [0.0; 3],
            bones: vec![
                BoneSpec {
                    structure: StructureId::FEMUR,
                    center: [64.0, 34.0, 24.0],
                    radii_mm: [40.0, 24.0, 18.0],
                    intensity: 400.0,
                    cartilage: Some(cap(StructureId::FEMORAL_CARTILAGE, 1.0)),
                },
                BoneSpec {
                    structure: StructureId::TIBIA,
                    center: [64.0, 96.0, 24.0],
                    radii_mm: [38.0, 22.0, 18.0],
                    intensity: 400.0,
                    cartilage: Some(cap(StructureId::TIBIAL_CARTILAGE, -1.0)),
                },
            ],
            background: 50.0,
            noise_sigma: 20.0,
            supersample: 3,
            deformation: None,
        }
    }
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid, VolumeError> {
        Grid::new(self.dims, self.spacing, self.origin)
    }

    /// The same anatomy scaled onto a grid with `factor`× fewer voxels per in-plane axis
    /// (used for fast tests).
    pub fn downscaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.dims = [
            (self.dims[0] as f64 / factor).round() as usize,
            (self.dims[1] as f64 / factor).round() as usize,
            self.dims[2],
        ];
        s.spacing = [self.spacing[0] * factor, self.spacing[1] * factor, self.spacing[2]];
        s
    }

    pub fn structures(&self) -> Vec<StructureId> {
        let mut out = Vec::new();
        for b in &self.bones {
            out.push(b.structure.clone());
            if let Some(c) = &b.cartilage {
                out.push(c.structure.clone());
            }
        }
        out
    }

    /// Tissue label at template point `y` (index into [`Self::structures`], or `None` for
    /// background) and its noise-free intensity.
    fn tissue(&self, y: [f64; 3]) -> (Option<usize>, f64) {
        let mut label = 0;
        for b in &self.bones {
            let e = |pad: f64| -> f64 {
                (0..3)
                    .map(|a| ((y[a] - b.center[a]) / (b.radii_mm[a] + pad)).powi(2))
                    .sum()
            };
            if e(0.0) <= 1.0 {
                return (Some(label), b.intensity);
            }
            label += 1;
            if let Some(c) = &b.cartilage {
                let facing = c.side * (y[1] - b.center[1]) / b.radii_mm[1];
                if facing > c.cap_threshold && e(c.thickness_mm) <= 1.0 {
                    return (Some(label), c.intensity);
                }
                label += 1;
            }
        }
        (None, self.background)
    }

    fn validate(&self) -> Result<Grid, PhantomError> {
        let grid = self.grid()?;
        for b in &self.bones {
            if b.radii_mm.iter().any(|r| !(*r > 0.0)) {
                return Err(PhantomError::Degenerate(format!(
                    "{}: radii must be positive",
                    b.structure
                )));
            }
            if let Some(c) = &b.cartilage {
                if !(c.thickness_mm >= grid.min_spacing()) {
                    return Err(PhantomError::Degenerate(format!(
                        "{}: shell thickness {} mm is thinner than one voxel ({} mm)",
                        c.structure,
                        c.thickness_mm,
                        grid.min_spacing()
                    )));
                }
            }
        }
        if self.supersample == 0 {
            return Err(PhantomError::Degenerate("supersample must be at least 1".into()));
        }
        Ok(grid)
    }

    /// Mean tissue intensity over the voxel footprint at `x`. The map is linearized across
    /// the voxel from forward differences, which is exact for affines and close for smooth warps.
    fn partial_volume(&self, t: &Composite<f64>, grid: &Grid, x: [f64; 3]) -> f64 {
        let n = self.supersample;
        let c = t.apply_point(x);
        let d: [[f64; 3]; 3] = std::array::from_fn(|a| {
            let mut p = x;
            p[a] += grid.spacing[a];
            let q = t.apply_point(p);
            [q[0] - c[0], q[1] - c[1], q[2] - c[2]]
        });
        let u = |m: usize| (m as f64 + 0.5) / n as f64 - 0.5;
        let mut acc = 0.0;
        for mk in 0..n {
            for mj in 0..n {
                for mi in 0..n {
                    let w = [u(mi), u(mj), u(mk)];
                    let y = std::array::from_fn(|q| c[q] + w[0] * d[0][q] + w[1] * d[1][q] + w[2] * d[2][q]);
                    acc += self.tissue(y).1;
                }
            }
        }
        acc / (n * n * n) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume<f32>,
    pub masks: BTreeMap<StructureId, Volume<f32>>,
    pub prompts: PromptSet,
    /// Patient → template map used to generate this phantom.
    pub deformation: Composite<f64>,
}

/// Generates one phantom. The seed drives the FFD coefficients and the noise.
pub fn generate(spec: &PhantomSpec, seed: u64, image_id: &str) -> Result<Phantom, PhantomError> {
    let grid = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deformation = match &spec.deformation {
        Some(d) => d.realize(&grid, &mut rng)?,
        None => Composite::identity(),
    };
    let structures = spec.structures();
    let centers: Vec<(Option<usize>, f64)> = (0..grid.len())
        .map(|idx| {
            let [i, j, k] = grid.coords_of(idx);
            spec.tissue(deformation.apply_point(grid.world_of(i, j, k)))
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let data: Vec<f32> = centers
        .iter()
        .enumerate()
        .map(|(idx, &(_, crisp))| {
            let base = if spec.supersample > 1 {
                let [i, j, k] = grid.coords_of(idx);
                spec.partial_volume(&deformation, &grid, grid.world_of(i, j, k))
            } else {
                crisp
            };
            let n = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (base + n) as f32
        })
        .collect();
    let image = Volume::new(grid.clone(), data, VolumeKind::Intensity)?;
    let mut masks = BTreeMap::new();
    for (n, s) in structures.iter().enumerate() {
        let m = Volume::new(
            grid.clone(),
            centers
                .iter()
                .map(|(l, _)| if *l == Some(n) { 1.0 } else { 0.0 })
                .collect(),
            VolumeKind::Mask,
        )?;
        if m.count_nonzero() == 0 {
            return Err(PhantomError::Degenerate(format!("{s} has no voxels on the grid")));
        }
        masks.insert(s.clone(), m);
    }
    let prompts = default_prompts(&masks, image_id);
    Ok(Phantom {
        image,
        masks,
        prompts,
        deformation,
    })
}

/// A new image (undeformed template) plus deformed reference phantoms.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub new_image: Phantom,
    pub references: Vec<Phantom>,
}

pub fn generate_case(
    spec: &PhantomSpec,
    seed: u64,
    n_references: usize,
    bounds: &DeformationBounds,
) -> Result<PhantomCase, PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = PhantomSpec {
        deformation: None,
        ..spec.clone()
    };
    let new_image = generate(&template, rng.gen(), "new")?;
    let mut references = Vec::with_capacity(n_references);
    for i in 0..n_references {
        let d = DeformationSpec::random(&mut rng, bounds);
        let s = PhantomSpec {
            deformation: Some(d),
            ..spec.clone()
        };
        references.push(generate(&s, rng.gen(), &format!("ref-{i}"))?);
    }
    Ok(PhantomCase { new_image, references })
}

#[cfg(test)]
mod tests;
