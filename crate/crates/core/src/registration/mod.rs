//! Intensity-based registration: multi-resolution affine alignment followed by a cubic
//! B-spline free-form deformation, both minimizing SSD by steepest descent.
//!
//! The returned transform maps fixed-image world coordinates to moving-image world
//! coordinates, so `resample_through(moving, fixed.grid(), &result.transform, ..)` brings the
//! moving image onto the fixed grid.

mod config;
pub mod objective;
mod optimizer;
mod pyramid;

use serde::Serialize;
use thiserror::Error;

pub use config::{AffineDof, RegistrationConfig, Similarity};
pub use objective::{AffineObjective, FfdObjective};

use crate::scalar::Real;
use crate::transform::{Affine, Composite, Ffd, SpatialTransform, TransformError};
use crate::volume::{trilinear_with_gradient, Volume};
use optimizer::{minimize, Problem, Settings};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error("no overlap between fixed and mapped moving image ({stage:?} stage, level {level})")]
    EmptyOverlap { stage: Stage, level: usize },
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Affine,
    Ffd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSummary {
    pub stage: Stage,
    /// 0 is the coarsest level.
    pub level: usize,
    pub dims: [usize; 3],
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Index of this level's first entry in [`RegistrationResult::cost_trace`].
    pub trace_start: usize,
    pub trace_len: usize,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: Composite<f64>,
    pub final_cost: f64,
    /// Objective values per level, concatenated: the start cost then one entry per accepted step.
    pub cost_trace: Vec<f64>,
    pub levels: Vec<LevelSummary>,
}

impl RegistrationResult {
    fn identity() -> Self {
        Self {
            transform: Composite::identity(),
            final_cost: f64::NAN,
            cost_trace: Vec::new(),
            levels: Vec::new(),
        }
    }

    pub fn level_trace(&self, level: &LevelSummary) -> &[f64] {
        &self.cost_trace[level.trace_start..level.trace_start + level.trace_len]
    }

    fn push_level(&mut self, stage: Stage, level: usize, dims: [usize; 3], out: &optimizer::Outcome) {
        let summary = LevelSummary {
            stage,
            level,
            dims,
            iterations: out.iterations,
            initial_cost: out.trace[0],
            final_cost: *out.trace.last().unwrap(),
            converged: out.converged,
            trace_start: self.cost_trace.len(),
            trace_len: out.trace.len(),
        };
        self.final_cost = summary.final_cost;
        self.cost_trace.extend_from_slice(&out.trace);
        self.levels.push(summary);
    }
}

/// Mean squared intensity difference over the overlap Ω (voxels of `fixed` whose mapped point
/// lies inside the physical extent of `moving`). Intensities are used as stored, without
/// prescaling.
pub fn ssd<T: Real, M: SpatialTransform<f64> + ?Sized>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    t: &M,
) -> Result<f64, RegistrationError> {
    let mdata: Vec<f64> = moving.data().iter().map(|v| v.as_f64()).collect();
    let mg = moving.grid();
    let fg = fixed.grid();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (idx, f) in fixed.data().iter().enumerate() {
        let [i, j, k] = fg.coords_of(idx);
        let y = t.apply_point(fg.world_of(i, j, k));
        let c = mg.world_to_voxel(y).0;
        if let Some((m, _)) = trilinear_with_gradient(&mdata, mg.dims, c) {
            let e = m - f.as_f64();
            sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(RegistrationError::EmptyOverlap {
            stage: Stage::Affine,
            level: 0,
        });
    }
    Ok(sum / count as f64)
}

impl Problem for AffineObjective<'_> {
    fn value(&self, x: &[f64]) -> Option<f64> {
        AffineObjective::value(self, x)
    }
    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        AffineObjective::value_and_gradient(self, x)
    }
    fn motion(&self, x: &[f64], dir: &[f64]) -> f64 {
        AffineObjective::motion(self, x, dir)
    }
}

impl Problem for FfdObjective<'_> {
    fn value(&self, x: &[f64]) -> Option<f64> {
        FfdObjective::value(self, x)
    }
    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        FfdObjective::value_and_gradient(self, x)
    }
    fn motion(&self, _x: &[f64], dir: &[f64]) -> f64 {
        FfdObjective::motion(self, dir)
    }
}

/// Prescaled `f64` pyramids of both images (coarse first).
struct Pyramids {
    fixed: Vec<Volume<f64>>,
    moving: Vec<Volume<f64>>,
}

impl Pyramids {
    fn new<T: Real>(fixed: &Volume<T>, moving: &Volume<T>, levels: usize) -> Self {
        let max = fixed.max_value().as_f64();
        let scale = if max > 0.0 && max.is_finite() { 1.0 / max } else { 1.0 };
        let prescale = |v: &Volume<T>| {
            let data = v.data().iter().map(|x| x.as_f64() * scale).collect();
            Volume::new(v.grid().clone(), data, crate::volume::VolumeKind::Intensity).expect("same grid as source")
        };
        Self {
            fixed: pyramid::build(prescale(fixed), levels),
            moving: pyramid::build(prescale(moving), levels),
        }
    }
}

fn settings(cfg: &RegistrationConfig, max_iters: usize, level_grid_spacing: f64) -> Settings {
    Settings {
        max_iters,
        tol: cfg.convergence_tol,
        window: cfg.convergence_window,
        armijo_c: cfg.armijo_c,
        shrink: cfg.step_shrink,
        max_step_mm: cfg.max_step_voxels * level_grid_spacing,
    }
}

/// Characteristic lever arm (mm) used to precondition rotation and scale parameters:
/// the RMS distance of a uniform box of the fixed extent from its center.
fn lever_arm(fixed: &Volume<impl Real>) -> f64 {
    let e = fixed.grid().extent();
    ((e[0] * e[0] + e[1] * e[1] + e[2] * e[2]) / 12.0).sqrt().max(1.0)
}

fn affine_stage<T: Real>(
    fixed: &Volume<T>,
    pyr: &Pyramids,
    cfg: &RegistrationConfig,
    result: &mut RegistrationResult,
) -> Result<Affine<f64>, RegistrationError> {
    let center = fixed.grid().center();
    let radius = lever_arm(fixed);
    let mut q: Option<Vec<f64>> = None;
    let mut affine = Affine::identity();
    for (level, (f, m)) in pyr.fixed.iter().zip(&pyr.moving).enumerate() {
        let obj = AffineObjective::new(f, m, cfg.affine_dof, center, radius);
        let x0 = q.take().unwrap_or_else(|| obj.identity_params());
        let s = settings(cfg, cfg.affine_max_iters, f.grid().min_spacing());
        let out = minimize(&obj, x0, &s).ok_or(RegistrationError::EmptyOverlap {
            stage: Stage::Affine,
            level,
        })?;
        log::debug!(
            "affine level {level}: {} iterations, cost {:.6e} -> {:.6e}",
            out.iterations,
            out.trace[0],
            out.trace.last().unwrap()
        );
        result.push_level(Stage::Affine, level, f.dims(), &out);
        affine = obj.affine(&out.x);
        q = Some(out.x);
    }
    affine.check_invertible()?;
    Ok(affine)
}

fn ffd_stage<T: Real>(
    fixed: &Volume<T>,
    pyr: &Pyramids,
    init: &Affine<f64>,
    cfg: &RegistrationConfig,
    result: &mut RegistrationResult,
) -> Result<Ffd<f64>, RegistrationError> {
    let levels = pyr.fixed.len();
    let coarse = 2f64.powi(levels as i32 - 1);
    let spacing = fixed.spacing().map(|s| s * cfg.control_spacing_voxels * coarse);
    let mut lattice = Ffd::covering(fixed.grid(), spacing)?;
    for (level, (f, m)) in pyr.fixed.iter().zip(&pyr.moving).enumerate() {
        if level > 0 {
            lattice = lattice.refined();
        }
        let obj = FfdObjective::new(f, m, *init, &lattice, cfg.bending_weight);
        let x0: Vec<f64> = lattice.coeffs().iter().flatten().copied().collect();
        let s = settings(cfg, cfg.ffd_max_iters, f.grid().min_spacing());
        let out = minimize(&obj, x0, &s).ok_or(RegistrationError::EmptyOverlap {
            stage: Stage::Ffd,
            level,
        })?;
        log::debug!(
            "ffd level {level} ({} knots): {} iterations, cost {:.6e} -> {:.6e}",
            lattice.len(),
            out.iterations,
            out.trace[0],
            out.trace.last().unwrap()
        );
        result.push_level(Stage::Ffd, level, f.dims(), &out);
        lattice = obj.lattice_with(&out.x);
    }
    Ok(lattice)
}

/// Affine registration of `moving` to `fixed`; the result carries no FFD.
pub fn register_affine<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    cfg.validate()?;
    let pyr = Pyramids::new(fixed, moving, cfg.pyramid_levels);
    let mut result = RegistrationResult::identity();
    let affine = affine_stage(fixed, &pyr, cfg, &mut result)?;
    result.transform = Composite::from_affine(affine);
    Ok(result)
}

/// FFD registration on top of a fixed initial affine.
pub fn register_ffd<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    init: &Affine<f64>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    cfg.validate()?;
    init.check_invertible()?;
    let pyr = Pyramids::new(fixed, moving, cfg.pyramid_levels);
    let mut result = RegistrationResult::identity();
    let ffd = ffd_stage(fixed, &pyr, init, cfg, &mut result)?;
    result.transform = Composite::with_ffd(*init, ffd);
    Ok(result)
}

/// Affine then FFD, each stage gated by the config. With both disabled the identity is returned.
pub fn register<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    cfg.validate()?;
    let mut result = RegistrationResult::identity();
    if !cfg.enable_affine && !cfg.enable_ffd {
        return Ok(result);
    }
    let pyr = Pyramids::new(fixed, moving, cfg.pyramid_levels);
    let affine = if cfg.enable_affine {
        affine_stage(fixed, &pyr, cfg, &mut result)?
    } else {
        Affine::identity()
    };
    result.transform = if cfg.enable_ffd {
        let ffd = ffd_stage(fixed, &pyr, &affine, cfg, &mut result)?;
        Composite::with_ffd(affine, ffd)
    } else {
        Composite::from_affine(affine)
    };
    Ok(result)
}
