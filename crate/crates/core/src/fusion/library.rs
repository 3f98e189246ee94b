use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::FusionError;
use crate::phantom::Phantom;
use crate::prompts::{load_prompts, save_prompts, PromptSet, StructureId};
use crate::volume::{load_volume, save_volume, Volume, VolumeFormat};

#[derive(Debug, Clone)]
pub struct LibraryEntry {
    pub id: String,
    pub image: Volume<f32>,
    pub prompts: PromptSet,
    /// Full reference masks; only the atlas baseline needs them.
    pub masks: Option<BTreeMap<StructureId, Volume<f32>>>,
}

impl LibraryEntry {
    pub fn from_phantom(id: impl Into<String>, p: &Phantom, with_masks: bool) -> Self {
        Self {
            id: id.into(),
            image: p.image.clone(),
            prompts: p.prompts.clone(),
            masks: with_masks.then(|| p.masks.clone()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceLibrary {
    pub entries: Vec<LibraryEntry>,
}

/// On-disk manifest. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub prompts: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<BTreeMap<StructureId, PathBuf>>,
}

impl ReferenceLibrary {
    pub fn new(entries: Vec<LibraryEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Non-empty, unique ids, and every stored mask on its entry's image grid.
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.entries.is_empty() {
            return Err(FusionError::EmptyLibrary);
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(FusionError::Library(format!("duplicate reference id {:?}", e.id)));
            }
            for (s, m) in e.masks.iter().flatten() {
                if !m.same_grid(&e.image) {
                    return Err(FusionError::Library(format!(
                        "reference {}: mask {s} is not on the image grid",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self, FusionError> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| FusionError::Library(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| FusionError::Library(format!("{}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let vol = |p: &Path| {
            let p = resolve(p);
            load_volume::<f32>(&p, VolumeFormat::from_path(&p))
                .map_err(|e| FusionError::Library(format!("{}: {e}", p.display())))
        };
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for m in &manifest.entries {
            let prompts = load_prompts(&resolve(&m.prompts))
                .map_err(|e| FusionError::Library(format!("reference {}: {e}", m.id)))?;
            let masks = match &m.masks {
                None => None,
                Some(paths) => Some(
                    paths
                        .iter()
                        .map(|(s, p)| Ok((s.clone(), vol(p)?.binarized())))
                        .collect::<Result<BTreeMap<_, _>, FusionError>>()?,
                ),
            };
            entries.push(LibraryEntry {
                id: m.id.clone(),
                image: vol(&m.image)?,
                prompts,
                masks,
            });
        }
        let lib = Self { entries };
        lib.validate()?;
        Ok(lib)
    }

    /// Writes every entry into `dir` as NIfTI volumes plus prompt JSON, and the manifest as
    /// `dir/library.json` with relative paths. Returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, FusionError> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| FusionError::Library(format!("{}: {e}", dir.display())))?;
        let vol = |v: &Volume<f32>, name: String| {
            save_volume(v, &dir.join(&name), VolumeFormat::Nifti1)
                .map_err(|e| FusionError::Library(e.to_string()))
                .map(|_| PathBuf::from(name))
        };
        let mut manifest = Manifest { entries: Vec::new() };
        for e in &self.entries {
            let prompts = PathBuf::from(format!("{}.prompts.json", e.id));
            save_prompts(&e.prompts, &dir.join(&prompts)).map_err(|err| FusionError::Library(err.to_string()))?;
            let masks = match &e.masks {
                None => None,
                Some(m) => Some(
                    m.iter()
                        .map(|(s, v)| Ok((s.clone(), vol(v, format!("{}.{s}.nii", e.id))?)))
                        .collect::<Result<BTreeMap<_, _>, FusionError>>()?,
                ),
            };
            manifest.entries.push(ManifestEntry {
                id: e.id.clone(),
                image: vol(&e.image, format!("{}.nii", e.id))?,
                prompts,
                masks,
            });
        }
        let path = dir.join("library.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest always serializes");
        std::fs::write(&path, text).map_err(|e| FusionError::Library(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
