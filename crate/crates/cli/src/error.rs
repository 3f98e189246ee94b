use std::fmt::Display;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Backend(String),
    #[error("no fused mask for: {}", .0.join(", "))]
    StructureFailure(Vec<String>),
}

impl CliError {
    pub fn data(path: &Path, e: impl Display) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Backend(_) => 4,
            Self::StructureFailure(_) => 5,
        }
    }
}
