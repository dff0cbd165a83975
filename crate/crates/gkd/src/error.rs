use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum GkdError {
    #[error(transparent)]
    Core(#[from] gkd_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl GkdError {
    /// Stable identifier for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            GkdError::Core(e) => match e {
                gkd_core::Error::Param(_) => "parameter",
                gkd_core::Error::Shape { .. } => "shape",
                gkd_core::Error::Numeric(_) => "numeric",
                gkd_core::Error::Divergence { .. } => "divergence",
                gkd_core::Error::MissingPrerequisite(_) => "missing_prerequisite",
                gkd_core::Error::Checkpoint(_) => "checkpoint",
                gkd_core::Error::FrozenUpdate(_) => "frozen_update",
            },
            GkdError::Io { .. } => "io",
            GkdError::Config(_) => "config",
            GkdError::Format { .. } => "format",
            GkdError::Locked(_) => "locked",
        }
    }
}

pub type Result<T> = std::result::Result<T, GkdError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> GkdError + '_ {
    move |source| GkdError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn format_err(path: &Path, detail: impl Into<String>) -> GkdError {
    GkdError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}
