//! Point prompts: data model, warping between image spaces and intensity filtering.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::transform::SpatialTransform;
use crate::volume::{Grid, Interpolation, OutOfBounds, Volume, VoxelCoord};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("malformed prompt/policy JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("prompt {index} has a non-finite position")]
    NonFinite { index: usize },
    #[error("invalid filter policy for {structure}: [{lo}, {hi}]")]
    InvalidPolicy { structure: StructureId, lo: f64, hi: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PromptError + '_ {
    move |source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Anatomical structure label. The knee structures are predefined; any other name is accepted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StructureId(Cow<'static, str>);

impl StructureId {
    pub const FEMUR: Self = Self(Cow::Borrowed("femur"));
    pub const TIBIA: Self = Self(Cow::Borrowed("tibia"));
    pub const FEMORAL_CARTILAGE: Self = Self(Cow::Borrowed("femoral_cartilage"));
    pub const TIBIAL_CARTILAGE: Self = Self(Cow::Borrowed("tibial_cartilage"));

    pub fn new(name: impl Into<String>) -> Self {
        Self(Cow::Owned(name.into()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn knee() -> [Self; 4] {
        [
            Self::FEMUR,
            Self::TIBIA,
            Self::FEMORAL_CARTILAGE,
            Self::TIBIAL_CARTILAGE,
        ]
    }
}

impl fmt::Display for StructureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointPrompt {
    pub structure: StructureId,
    pub polarity: Polarity,
    /// Continuous voxel coordinates in the owning image.
    pub position: VoxelCoord,
}

impl PointPrompt {
    pub fn new(structure: StructureId, polarity: Polarity, position: [f64; 3]) -> Self {
        Self {
            structure,
            polarity,
            position: VoxelCoord(position),
        }
    }

    pub fn is_positive(&self) -> bool {
        self.polarity == Polarity::Positive
    }

    /// Slice the prompt is assigned to, `round(w)`.
    pub fn slice(&self) -> i64 {
        self.position.nearest_index()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub image_id: String,
    pub prompts: Vec<PointPrompt>,
}

impl PromptSet {
    pub fn new(image_id: impl Into<String>, prompts: Vec<PointPrompt>) -> Self {
        Self {
            image_id: image_id.into(),
            prompts,
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn structures(&self) -> BTreeSet<StructureId> {
        self.prompts.iter().map(|p| p.structure.clone()).collect()
    }

    pub fn for_structure<'a>(&'a self, s: &'a StructureId) -> impl Iterator<Item = &'a PointPrompt> + 'a {
        self.prompts.iter().filter(move |p| &p.structure == s)
    }

    pub fn positive_count(&self, s: &StructureId) -> usize {
        self.for_structure(s).filter(|p| p.is_positive()).count()
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match self.prompts.iter().position(|p| !p.position.is_finite()) {
            Some(index) => Err(PromptError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompt sets always serialize")
    }
}

pub fn load_prompts(path: &Path) -> Result<PromptSet, PromptError> {
    PromptSet::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn save_prompts(ps: &PromptSet, path: &Path) -> Result<(), PromptError> {
    std::fs::write(path, ps.to_json()).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpOutcome {
    pub prompts: PromptSet,
    /// Prompts whose warped position fell outside the target grid.
    pub dropped: BTreeMap<StructureId, usize>,
}

impl WarpOutcome {
    pub fn total_dropped(&self) -> usize {
        self.dropped.values().sum()
    }
}

/// Maps prompts from `ref_grid` voxel space into `new_grid` voxel space through the pull-back
/// transform `t` (reference world → new world). A prompt is kept iff `round(position)` is a
/// valid voxel of `new_grid`.
pub fn warp_prompts<M: SpatialTransform<f64> + ?Sized>(
    ps: &PromptSet,
    t: &M,
    ref_grid: &Grid,
    new_grid: &Grid,
) -> WarpOutcome {
    let mut kept = Vec::with_capacity(ps.len());
    let mut dropped = BTreeMap::new();
    for p in &ps.prompts {
        let world = t.apply_point(ref_grid.voxel_to_world(p.position));
        let position = new_grid.world_to_voxel(world);
        if position.is_finite() && new_grid.contains(position) {
            kept.push(PointPrompt { position, ..p.clone() });
        } else {
            *dropped.entry(p.structure.clone()).or_insert(0) += 1;
        }
    }
    WarpOutcome {
        prompts: PromptSet::new(ps.image_id.clone(), kept),
        dropped,
    }
}

/// Accepted intensity interval per structure for positive prompts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterPolicy(pub BTreeMap<StructureId, [f64; 2]>);

impl FilterPolicy {
    /// Bone positives in [0, 1200], cartilage positives in [800, 3000].
    pub fn knee_pd() -> Self {
        Self(BTreeMap::from([
            (StructureId::FEMUR, [0.0, 1200.0]),
            (StructureId::TIBIA, [0.0, 1200.0]),
            (StructureId::FEMORAL_CARTILAGE, [800.0, 3000.0]),
            (StructureId::TIBIAL_CARTILAGE, [800.0, 3000.0]),
        ]))
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (s, [lo, hi]) in &self.0 {
            if !(lo < hi) {
                return Err(PromptError::InvalidPolicy {
                    structure: s.clone(),
                    lo: *lo,
                    hi: *hi,
                });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn interval(&self, s: &StructureId) -> Option<[f64; 2]> {
        self.0.get(s).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub prompts: PromptSet,
    /// Positive prompts removed per structure.
    pub removed: BTreeMap<StructureId, usize>,
    /// Structures that had positives before filtering and none after.
    pub emptied: Vec<StructureId>,
}

/// Removes positive prompts whose trilinear intensity probe lies outside their structure's
/// interval. Negative prompts and structures without a policy entry pass through.
pub fn filter_prompts<T: Real>(ps: &PromptSet, image: &Volume<T>, policy: &FilterPolicy) -> FilterOutcome {
    let mut kept = Vec::with_capacity(ps.len());
    let mut removed = BTreeMap::new();
    for p in &ps.prompts {
        let keep = match (p.polarity, policy.interval(&p.structure)) {
            (Polarity::Positive, Some([lo, hi])) => {
                let v = image
                    .sample(p.position, Interpolation::Trilinear, OutOfBounds::Clamp)
                    .as_f64();
                v >= lo && v <= hi
            }
            _ => true,
        };
        if keep {
            kept.push(p.clone());
        } else {
            *removed.entry(p.structure.clone()).or_insert(0) += 1;
        }
    }
    let prompts = PromptSet::new(ps.image_id.clone(), kept);
    let emptied = ps
        .structures()
        .into_iter()
        .filter(|s| ps.positive_count(s) > 0 && prompts.positive_count(s) == 0)
        .collect();
    FilterOutcome {
        prompts,
        removed,
        emptied,
    }
}
