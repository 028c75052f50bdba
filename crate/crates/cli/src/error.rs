use std::path::{Path, PathBuf};

use dq_core::DqError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("no files match {0:?}")]
    NoMatches(String),
    #[error("invalid glob pattern: {0}")]
    Pattern(#[from] glob::PatternError),
    #[error("{}: {source}", path.display())]
    BadMagic { path: PathBuf, source: DqError },
    #[error("{}: {source}", path.display())]
    Truncated { path: PathBuf, source: DqError },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: DqError },
    #[error("shape inconsistency: {} has shape {first_shape:?} but {} has shape {shape:?}", first.display(), path.display())]
    ShapeInconsistency {
        first: PathBuf,
        first_shape: Vec<usize>,
        path: PathBuf,
        shape: Vec<usize>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("import failed: {0}")]
    Import(#[from] ImportError),
    #[error("data error: {0}")]
    Data(DqError),
    #[error("training diverged: {0}")]
    Divergence(DqError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 IO, 4 data, 5 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Import(_) | Self::Data(_) => 4,
            Self::Divergence(_) => 5,
        }
    }
}

impl From<DqError> for CliError {
    fn from(e: DqError) -> Self {
        match e {
            DqError::Divergence { .. } => Self::Divergence(e),
            DqError::InvalidArgument(m) => Self::Config(m),
            DqError::Io(source) => Self::Io {
                path: PathBuf::new(),
                source,
            },
            other => Self::Data(other),
        }
    }
}
