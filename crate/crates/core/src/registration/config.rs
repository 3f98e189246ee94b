use serde::{Deserialize, Serialize};

use super::RegistrationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffineDof {
    /// Euler rotations, per-axis log-scales and translation (9 parameters).
    RigidScale,
    /// Unconstrained 3×3 matrix and translation (12 parameters).
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Ssd,
}

/// Registration parameters. Every field has a default, so partial JSON files are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Resolution levels; each coarser level halves the matrix size.
    pub pyramid_levels: usize,
    pub affine_dof: AffineDof,
    pub similarity: Similarity,
    /// Weight of the bending energy term in the FFD objective.
    pub bending_weight: f64,
    /// Final knot spacing in voxels of the fixed image; coarser levels multiply it by 2 per level.
    pub control_spacing_voxels: f64,
    pub affine_max_iters: usize,
    pub ffd_max_iters: usize,
    /// Stop when the relative cost decrease over `convergence_window` iterations falls below this.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub enable_affine: bool,
    pub enable_ffd: bool,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub step_shrink: f64,
    /// Largest point motion a proposed step may cause, in voxels of the current level.
    pub max_step_voxels: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            affine_dof: AffineDof::RigidScale,
            similarity: Similarity::Ssd,
            bending_weight: 0.65,
            control_spacing_voxels: 5.0,
            affine_max_iters: 200,
            ffd_max_iters: 300,
            convergence_tol: 1e-6,
            convergence_window: 5,
            enable_affine: true,
            enable_ffd: true,
            armijo_c: 1e-4,
            step_shrink: 0.5,
            max_step_voxels: 2.0,
        }
    }
}

impl RegistrationConfig {
    /// Affine only (the "no non-rigid" ablation).
    pub fn affine_only() -> Self {
        Self {
            enable_ffd: false,
            ..Self::default()
        }
    }

    /// No registration at all: `register` returns the identity.
    pub fn disabled() -> Self {
        Self {
            enable_affine: false,
            enable_ffd: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: String| Err(RegistrationError::InvalidConfig(m));
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be ≥ 1".into());
        }
        if !(self.bending_weight >= 0.0 && self.bending_weight.is_finite()) {
            return bad(format!("bending_weight {} must be ≥ 0", self.bending_weight));
        }
        if !(self.control_spacing_voxels > 0.0) {
            return bad("control_spacing_voxels must be > 0".into());
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo_c must lie in (0, 1)".into());
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return bad("step_shrink must lie in (0, 1)".into());
        }
        if !(self.max_step_voxels > 0.0) {
            return bad("max_step_voxels must be > 0".into());
        }
        if self.convergence_window == 0 {
            return bad("convergence_window must be ≥ 1".into());
        }
        Ok(())
    }
}
