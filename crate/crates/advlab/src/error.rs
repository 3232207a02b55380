//! Crate-wide error type. Every fallible public operation returns
//! [`LabError`] so callers see one coherent error surface.

use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}{}: {source}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Json {
        path: PathBuf,
        line: Option<usize>,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("checkpoint {path} is not a {expected} checkpoint (found kind '{found}')")]
    CheckpointKind {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("stage '{stage}' requires '{missing}' to run first (missing artifact {path})")]
    MissingUpstream {
        stage: String,
        missing: String,
        path: PathBuf,
    },

    #[error("run directory {dir} is locked by another process (lock file {lock})")]
    Locked { dir: PathBuf, lock: PathBuf },

    #[error(
        "output directory {dir} was previously used with a different configuration; \
         pass --force to start over or choose a fresh --out directory"
    )]
    StaleConfig { dir: PathBuf },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        LabError::Json {
            path: path.into(),
            line: None,
            source,
        }
    }

    pub fn json_line(path: impl Into<PathBuf>, line: usize, source: serde_json::Error) -> Self {
        LabError::Json {
            path: path.into(),
            line: Some(line),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for missing upstream stages,
    /// 3 for numeric blow-ups, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::MissingUpstream { .. } => 2,
            LabError::NonFinite { .. } => 3,
            LabError::Tensor(TensorError::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
