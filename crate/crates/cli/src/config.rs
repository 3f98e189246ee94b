use std::path::Path;

use regprompt::phantom::{DeformationBounds, PhantomSpec};
use regprompt::prompts::FilterPolicy;
use regprompt::registration::RegistrationConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Contents of `--config`. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub registration: RegistrationConfig,
    pub policy: FilterPolicy,
    pub inverse_tol_mm: f64,
    pub inverse_max_iter: usize,
    pub phantom: PhantomSpec,
    pub bounds: DeformationBounds,
    pub preprocess: PreprocessConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub dims: [usize; 3],
    pub clip: [f64; 2],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            dims: [512, 512, 40],
            clip: [0.0, 3000.0],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            policy: FilterPolicy::knee_pd(),
            inverse_tol_mm: 0.1,
            inverse_max_iter: 100,
            phantom: PhantomSpec::default(),
            bounds: DeformationBounds::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(path, e))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: Self = match path {
            Some(p) => read_json(p)?,
            None => Self::default(),
        };
        cfg.registration
            .validate()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.policy
            .validate()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(cfg)
    }
}
