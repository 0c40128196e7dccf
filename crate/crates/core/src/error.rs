use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("level {level} outside hierarchy 0..={max}")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("level mismatch: expected {expected}, got {actual}")]
    LevelMismatch { expected: usize, actual: usize },
    #[error("coefficient vector of length {len} does not match N({level}) = {expected}")]
    Length { level: usize, len: usize, expected: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("ensemble of size {0} is too small, at least 2 particles are required")]
    TooFewParticles(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("filter phase violation: {0}")]
    Phase(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("observable is not supported here: {0}")]
    UnsupportedObservable(&'static str),
    #[error("study needs at least {needed} replicates for slope fitting, got {got}")]
    InsufficientReplicates { needed: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed input: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether the error stems from invalid user-supplied configuration.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::LevelOutOfRange { .. }
                | Error::NotPositiveDefinite(_)
                | Error::UnsupportedObservable(_)
                | Error::InsufficientReplicates { .. }
                | Error::Json(_)
        )
    }
}
