use std::path::PathBuf;

/// Crate-wide error type. Configuration problems are kept separate from
/// runtime failures so the command line can map them to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no feasible grid point at this resolution")]
    NoFeasibleGridPoint,

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Failed(String),

    #[error("missing file: {0}")]
    Missing(PathBuf),

    #[error("corrupt artifact {path}: {why}")]
    Corrupt { path: PathBuf, why: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the command line: 2 for configuration problems
    /// (including missing prerequisite artifacts), 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Missing(_) => 2,
            _ => 1,
        }
    }
}
