//! Multi-reference candidate generation and majority-vote fusion.
//!
//! Every strategy registers each reference (fixed) against the new image (moving), builds one
//! candidate mask per reference and structure on the new image's grid, and fuses the surviving
//! candidates by strict majority. A candidate that cannot be produced is dropped with a reason
//! and leaves the vote denominator.

mod library;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use library::{LibraryEntry, Manifest, ManifestEntry, ReferenceLibrary};

use crate::prompts::{filter_prompts, warp_prompts, FilterPolicy, PromptSet, StructureId};
use crate::registration::{register, LevelSummary, RegistrationConfig, RegistrationResult};
use crate::segmenter::{segment_volume, SegmentVolumeError, Segmenter};
use crate::transform::{invert, Identity, InverseStats, Inversion};
use crate::volume::{resample_through, Interpolation, Volume, VolumeError, VolumeKind};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("reference library is empty")]
    EmptyLibrary,
    #[error("reference library: {0}")]
    Library(String),
    #[error("reference {0} has no masks; the atlas strategy needs a mask per structure")]
    MissingMasks(String),
    #[error("majority vote over an empty candidate list")]
    NoCandidates,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("registrations were computed for a different library or image")]
    StaleRegistrations,
}

/// Strict per-voxel majority: a voxel is set iff more than `n_total / 2` candidates set it.
/// Ties go to background.
pub fn majority_vote(cands: &[&Volume<f32>], n_total: usize) -> Result<Volume<f32>, FusionError> {
    let first = cands.first().ok_or(FusionError::NoCandidates)?;
    for c in &cands[1..] {
        first.ensure_same_grid(c)?;
    }
    let mut counts = vec![0usize; first.grid().len()];
    for c in cands {
        for (n, v) in counts.iter_mut().zip(c.data()) {
            *n += usize::from(*v != 0.0);
        }
    }
    let data = counts
        .into_iter()
        .map(|n| if 2 * n > n_total { 1.0 } else { 0.0 })
        .collect();
    Ok(Volume::new(first.grid().clone(), data, VolumeKind::Mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Bring the new image into each reference frame, segment there, warp the mask back.
    IAlign,
    /// Warp each reference's prompts into the new image and segment it directly.
    PAlign,
    /// Warp the reference masks; no segmenter.
    Atlas,
    /// Reference prompts used at their original voxel positions.
    NoReg,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::IAlign, Strategy::PAlign, Strategy::Atlas, Strategy::NoReg];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::IAlign => "i-align",
            Strategy::PAlign => "p-align",
            Strategy::Atlas => "atlas",
            Strategy::NoReg => "no-reg",
        }
    }

    pub fn needs_segmenter(self) -> bool {
        self != Strategy::Atlas
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected i-align, p-align, atlas or no-reg)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub registration: RegistrationConfig,
    pub policy: FilterPolicy,
    pub inverse_tol_mm: f64,
    pub inverse_max_iter: usize,
    /// Structures to produce; `None` takes every structure named by the library.
    pub structures: Option<Vec<StructureId>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            policy: FilterPolicy::knee_pd(),
            inverse_tol_mm: 0.1,
            inverse_max_iter: 100,
            structures: None,
        }
    }
}

/// One registration per reference against a fixed new image, with a lazily computed inverse.
/// Shared between strategies so each pair is registered once.
pub struct Registrations {
    new_grid: crate::volume::Grid,
    ids: Vec<String>,
    entries: Vec<CachedRegistration>,
}

struct CachedRegistration {
    result: Result<RegistrationResult, String>,
    inverse: OnceLock<Result<Inversion<f64>, String>>,
}

impl Registrations {
    /// Registers every reference in parallel. Failures are kept per reference, not raised.
    pub fn compute(newimg: &Volume<f32>, lib: &ReferenceLibrary, cfg: &RegistrationConfig) -> Self {
        let entries = lib
            .entries
            .par_iter()
            .map(|e| {
                let result = register(&e.image, newimg, cfg).map_err(|err| err.to_string());
                if let Err(msg) = &result {
                    log::warn!("registration of reference {} failed: {msg}", e.id);
                }
                CachedRegistration {
                    result,
                    inverse: OnceLock::new(),
                }
            })
            .collect();
        Self {
            new_grid: newimg.grid().clone(),
            ids: lib.entries.iter().map(|e| e.id.clone()).collect(),
            entries,
        }
    }

    pub fn result(&self, index: usize) -> Result<&RegistrationResult, &str> {
        self.entries[index].result.as_ref().map_err(String::as_str)
    }

    /// Inverse of registration `index` sampled on the new image grid.
    pub fn inverse(&self, index: usize, tol_mm: f64, max_iter: usize) -> Result<&Inversion<f64>, &str> {
        let e = &self.entries[index];
        let reg = e.result.as_ref().map_err(String::as_str)?;
        e.inverse
            .get_or_init(|| invert(&reg.transform, &self.new_grid, tol_mm, max_iter).map_err(|err| err.to_string()))
            .as_ref()
            .map_err(String::as_str)
    }

    /// Computes all missing inverses in parallel.
    pub fn prefetch_inverses(&self, tol_mm: f64, max_iter: usize) {
        (0..self.entries.len()).into_par_iter().for_each(|i| {
            let _ = self.inverse(i, tol_mm, max_iter);
        });
    }

    fn check(&self, newimg: &Volume<f32>, lib: &ReferenceLibrary) -> Result<(), FusionError> {
        let ids_match = self.ids.len() == lib.len() && self.ids.iter().zip(&lib.entries).all(|(a, e)| *a == e.id);
        if ids_match && &self.new_grid == newimg.grid() {
            Ok(())
        } else {
            Err(FusionError::StaleRegistrations)
        }
    }

    fn inverse_stats(&self, index: usize) -> Option<InverseStats> {
        match self.entries[index].inverse.get() {
            Some(Ok(inv)) => Some(inv.stats.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", content = "detail", rename_all = "kebab-case")]
pub enum DropReason {
    Registration(String),
    Inversion(String),
    /// No positive prompt of the structure survived warping and filtering.
    NoPrompts,
    Backend(String),
    MissingMask,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::Registration(m) => write!(f, "registration failed: {m}"),
            DropReason::Inversion(m) => write!(f, "inverse warp failed: {m}"),
            DropReason::NoPrompts => f.write_str("no positive prompts left"),
            DropReason::Backend(m) => write!(f, "segmenter failed: {m}"),
            DropReason::MissingMask => f.write_str("reference has no mask for this structure"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CandidateStatus {
    Ok,
    Dropped(DropReason),
}

/// Prompt bookkeeping for one candidate. Counts cover the candidate's structure only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PromptAccounting {
    pub initial: usize,
    /// Lost because the warped position left the target grid.
    pub warp_dropped: usize,
    /// Positives removed by the intensity filter.
    pub filtered: usize,
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMask {
    pub source: String,
    pub structure: StructureId,
    /// Present iff the status is ok; always on the new image grid.
    pub mask: Option<Volume<f32>>,
    pub status: CandidateStatus,
    pub prompts: PromptAccounting,
}

impl CandidateMask {
    pub fn is_ok(&self) -> bool {
        self.status == CandidateStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceRecord {
    pub id: String,
    pub registration_cost: Option<f64>,
    pub registration_error: Option<String>,
    pub levels: Vec<LevelSummary>,
    /// Present when the strategy inverted this registration.
    pub inverse: Option<InverseStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureFailure {
    pub structure: StructureId,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub strategy: Strategy,
    pub fused: BTreeMap<StructureId, Volume<f32>>,
    /// Structures where every candidate was dropped; they have no fused mask.
    pub failures: Vec<StructureFailure>,
    pub candidates: Vec<CandidateMask>,
    pub references: Vec<ReferenceRecord>,
}

#[derive(Debug, Clone, Serialize)]
struct CandidateRecord<'a> {
    source: &'a str,
    structure: &'a StructureId,
    #[serde(flatten)]
    status: &'a CandidateStatus,
    prompts: PromptAccounting,
    voxels: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct StructureRecord {
    votes: usize,
    voxels: usize,
}

#[derive(Debug, Clone, Serialize)]
struct Provenance<'a> {
    strategy: Strategy,
    structures: BTreeMap<&'a StructureId, StructureRecord>,
    failures: &'a [StructureFailure],
    references: &'a [ReferenceRecord],
    candidates: Vec<CandidateRecord<'a>>,
}

impl FusionResult {
    /// Candidates with status ok for `s`; the vote denominator.
    pub fn votes(&self, s: &StructureId) -> usize {
        self.candidates
            .iter()
            .filter(|c| &c.structure == s && c.is_ok())
            .count()
    }

    pub fn dropped(&self) -> impl Iterator<Item = &CandidateMask> {
        self.candidates.iter().filter(|c| !c.is_ok())
    }

    /// Everything except the mask voxels, as pretty JSON.
    pub fn provenance_json(&self) -> String {
        let prov = Provenance {
            strategy: self.strategy,
            structures: self
                .fused
                .iter()
                .map(|(s, m)| {
                    (
                        s,
                        StructureRecord {
                            votes: self.votes(s),
                            voxels: m.count_nonzero(),
                        },
                    )
                })
                .collect(),
            failures: &self.failures,
            references: &self.references,
            candidates: self
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    source: &c.source,
                    structure: &c.structure,
                    status: &c.status,
                    prompts: c.prompts,
                    voxels: c.mask.as_ref().map(Volume::count_nonzero),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&prov).expect("provenance always serializes")
    }
}

fn structures_of(lib: &ReferenceLibrary, cfg: &PipelineConfig, strategy: Strategy) -> Vec<StructureId> {
    if let Some(s) = &cfg.structures {
        return s.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    }
    let mut all = BTreeSet::new();
    for e in &lib.entries {
        if strategy == Strategy::Atlas {
            all.extend(e.masks.iter().flat_map(|m| m.keys().cloned()));
        } else {
            all.extend(e.prompts.structures());
        }
    }
    all.into_iter().collect()
}

fn count_for(map: &BTreeMap<StructureId, usize>, s: &StructureId) -> usize {
    map.get(s).copied().unwrap_or(0)
}

fn segment_candidate<S: Segmenter + ?Sized>(
    seg: &mut S,
    image: &Volume<f32>,
    prompts: &PromptSet,
    s: &StructureId,
) -> Result<Volume<f32>, DropReason> {
    segment_volume(seg, image, prompts, s).map_err(|e| match e {
        SegmentVolumeError::StructureEmpty(_) => DropReason::NoPrompts,
        other => DropReason::Backend(other.to_string()),
    })
}

fn dropped(source: &str, s: &StructureId, reason: DropReason, prompts: PromptAccounting) -> CandidateMask {
    CandidateMask {
        source: source.to_owned(),
        structure: s.clone(),
        mask: None,
        status: CandidateStatus::Dropped(reason),
        prompts,
    }
}

fn accepted(source: &str, s: &StructureId, mask: Volume<f32>, prompts: PromptAccounting) -> CandidateMask {
    CandidateMask {
        source: source.to_owned(),
        structure: s.clone(),
        mask: Some(mask),
        status: CandidateStatus::Ok,
        prompts,
    }
}

/// Candidates for one reference under a prompt-driven strategy.
fn prompt_candidates<S: Segmenter + ?Sized>(
    strategy: Strategy,
    newimg: &Volume<f32>,
    entry: &LibraryEntry,
    index: usize,
    regs: Option<&Registrations>,
    structures: &[StructureId],
    cfg: &PipelineConfig,
    seg: &mut S,
) -> Vec<CandidateMask> {
    let initial = |s: &StructureId| entry.prompts.for_structure(s).count();
    let reg = match regs.map(|r| r.result(index)) {
        Some(Err(msg)) => {
            let reason = DropReason::Registration(msg.to_owned());
            return structures
                .iter()
                .map(|s| {
                    let acc = PromptAccounting {
                        initial: initial(s),
                        ..Default::default()
                    };
                    dropped(&entry.id, s, reason.clone(), acc)
                })
                .collect();
        }
        Some(Ok(r)) => Some(r),
        None => None,
    };

    match strategy {
        Strategy::IAlign => {
            let reg = reg.expect("i-align always registers");
            let moved = resample_through(newimg, entry.image.grid(), &reg.transform, Interpolation::Trilinear);
            let filtered = filter_prompts(&entry.prompts, &moved, &cfg.policy);
            let inverse =
                regs.expect("i-align always registers")
                    .inverse(index, cfg.inverse_tol_mm, cfg.inverse_max_iter);
            structures
                .iter()
                .map(|s| {
                    let acc = PromptAccounting {
                        initial: initial(s),
                        warp_dropped: 0,
                        filtered: count_for(&filtered.removed, s),
                        used: filtered.prompts.for_structure(s).count(),
                    };
                    let y = match segment_candidate(seg, &moved, &filtered.prompts, s) {
                        Ok(y) => y,
                        Err(reason) => return dropped(&entry.id, s, reason, acc),
                    };
                    match inverse {
                        Ok(inv) => {
                            let back = resample_through(&y, newimg.grid(), &inv.field, Interpolation::Nearest);
                            accepted(&entry.id, s, back, acc)
                        }
                        Err(msg) => dropped(&entry.id, s, DropReason::Inversion(msg.to_owned()), acc),
                    }
                })
                .collect()
        }
        Strategy::PAlign | Strategy::NoReg => {
            let warped = match reg {
                Some(r) => warp_prompts(&entry.prompts, &r.transform, entry.image.grid(), newimg.grid()),
                None => warp_prompts(&entry.prompts, &Identity, newimg.grid(), newimg.grid()),
            };
            let filtered = filter_prompts(&warped.prompts, newimg, &cfg.policy);
            structures
                .iter()
                .map(|s| {
                    let acc = PromptAccounting {
                        initial: initial(s),
                        warp_dropped: count_for(&warped.dropped, s),
                        filtered: count_for(&filtered.removed, s),
                        used: filtered.prompts.for_structure(s).count(),
                    };
                    match segment_candidate(seg, newimg, &filtered.prompts, s) {
                        Ok(y) => accepted(&entry.id, s, y, acc),
                        Err(reason) => dropped(&entry.id, s, reason, acc),
                    }
                })
                .collect()
        }
        Strategy::Atlas => unreachable!("atlas candidates come from masks"),
    }
}

fn atlas_candidates(
    newimg: &Volume<f32>,
    entry: &LibraryEntry,
    index: usize,
    regs: &Registrations,
    structures: &[StructureId],
    cfg: &PipelineConfig,
) -> Vec<CandidateMask> {
    let none = PromptAccounting::default();
    let inverse = match regs.result(index) {
        Err(msg) => Err(DropReason::Registration(msg.to_owned())),
        Ok(_) => regs
            .inverse(index, cfg.inverse_tol_mm, cfg.inverse_max_iter)
            .map_err(|m| DropReason::Inversion(m.to_owned())),
    };
    structures
        .iter()
        .map(|s| {
            let Some(mask) = entry.masks.as_ref().and_then(|m| m.get(s)) else {
                return dropped(&entry.id, s, DropReason::MissingMask, none);
            };
            match &inverse {
                Ok(inv) => {
                    let y = resample_through(&mask.binarized(), newimg.grid(), &inv.field, Interpolation::Nearest);
                    accepted(&entry.id, s, y, none)
                }
                Err(reason) => dropped(&entry.id, s, reason.clone(), none),
            }
        })
        .collect()
}

fn fuse(
    strategy: Strategy,
    structures: &[StructureId],
    candidates: Vec<CandidateMask>,
    references: Vec<ReferenceRecord>,
) -> Result<FusionResult, FusionError> {
    let mut fused = BTreeMap::new();
    let mut failures = Vec::new();
    for s in structures {
        let ok: Vec<&Volume<f32>> = candidates
            .iter()
            .filter(|c| &c.structure == s)
            .filter_map(|c| c.mask.as_ref())
            .collect();
        if ok.is_empty() {
            let dropped = candidates.iter().filter(|c| &c.structure == s).count();
            log::warn!("{strategy}: every candidate for {s} was dropped");
            failures.push(StructureFailure {
                structure: s.clone(),
                dropped,
            });
        } else {
            fused.insert(s.clone(), majority_vote(&ok, ok.len())?);
        }
    }
    Ok(FusionResult {
        strategy,
        fused,
        failures,
        candidates,
        references,
    })
}

fn reference_records(lib: &ReferenceLibrary, regs: Option<&Registrations>) -> Vec<ReferenceRecord> {
    lib.entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (cost, error, levels) = match regs.map(|r| r.result(i)) {
                Some(Ok(r)) => (Some(r.final_cost), None, r.levels.clone()),
                Some(Err(m)) => (None, Some(m.to_owned()), Vec::new()),
                None => (None, None, Vec::new()),
            };
            ReferenceRecord {
                id: e.id.clone(),
                registration_cost: cost.filter(|c| c.is_finite()),
                registration_error: error,
                levels,
                inverse: regs.and_then(|r| r.inverse_stats(i)),
            }
        })
        .collect()
}

/// Runs `strategy` reusing precomputed registrations. `seg` is required by every strategy
/// except the atlas.
pub fn run_with_registrations(
    strategy: Strategy,
    newimg: &Volume<f32>,
    lib: &ReferenceLibrary,
    cfg: &PipelineConfig,
    seg: Option<&mut dyn Segmenter>,
    regs: &Registrations,
) -> Result<FusionResult, FusionError> {
    lib.validate()?;
    regs.check(newimg, lib)?;
    if strategy == Strategy::Atlas {
        if let Some(e) = lib.entries.iter().find(|e| e.masks.is_none()) {
            return Err(FusionError::MissingMasks(e.id.clone()));
        }
    }
    let structures = structures_of(lib, cfg, strategy);
    if matches!(strategy, Strategy::IAlign | Strategy::Atlas) {
        regs.prefetch_inverses(cfg.inverse_tol_mm, cfg.inverse_max_iter);
    }
    let mut candidates = Vec::new();
    match (strategy, seg) {
        (Strategy::Atlas, _) => {
            for (i, e) in lib.entries.iter().enumerate() {
                candidates.extend(atlas_candidates(newimg, e, i, regs, &structures, cfg));
            }
        }
        (_, Some(seg)) => {
            let regs = (strategy != Strategy::NoReg).then_some(regs);
            for (i, e) in lib.entries.iter().enumerate() {
                candidates.extend(prompt_candidates(strategy, newimg, e, i, regs, &structures, cfg, seg));
            }
        }
        (_, None) => {
            return Err(FusionError::Library(format!("strategy {strategy} needs a segmenter")));
        }
    }
    let records = reference_records(lib, (strategy != Strategy::NoReg).then_some(regs));
    fuse(strategy, &structures, candidates, records)
}

/// Runs one strategy end to end, registering only when the strategy needs it.
pub fn run(
    strategy: Strategy,
    newimg: &Volume<f32>,
    lib: &ReferenceLibrary,
    cfg: &PipelineConfig,
    seg: Option<&mut dyn Segmenter>,
) -> Result<FusionResult, FusionError> {
    lib.validate()?;
    if strategy == Strategy::NoReg {
        let regs = Registrations::compute(newimg, lib, &RegistrationConfig::disabled());
        return run_with_registrations(strategy, newimg, lib, cfg, seg, &regs);
    }
    if strategy == Strategy::Atlas {
        if let Some(e) = lib.entries.iter().find(|e| e.masks.is_none()) {
            return Err(FusionError::MissingMasks(e.id.clone()));
        }
    }
    let regs = Registrations::compute(newimg, lib, &cfg.registration);
    run_with_registrations(strategy, newimg, lib, cfg, seg, &regs)
}

pub fn run_image_alignment(
    newimg: &Volume<f32>,
    lib: &ReferenceLibrary,
    cfg: &PipelineConfig,
    seg: &mut dyn Segmenter,
) -> Result<FusionResult, FusionError> {
    run(Strategy::IAlign, newimg, lib, cfg, Some(seg))
}

pub fn run_prompt_alignment(
    newimg: &Volume<f32>,
    lib: &ReferenceLibrary,
    cfg: &PipelineConfig,
    seg: &mut dyn Segmenter,
) -> Result<FusionResult, FusionError> {
    run(Strategy::PAlign, newimg, lib, cfg, Some(seg))
}

pub fn run_atlas(
    newimg: &Volume<f32>,
    lib: &ReferenceLibrary,
    cfg: &PipelineConfig,
) -> Result<FusionResult, FusionError> {
    run(Strategy::Atlas, newimg, lib, cfg, None)
}
