use std::path::PathBuf;

/// Errors raised anywhere in the selection / training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty action space: every entry is masked")]
    EmptyActionSpace,

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid task spec: {0}")]
    InvalidSpec(String),

    #[error("invalid demonstration id {id} (corpus size {size})")]
    InvalidId { id: usize, size: usize },

    #[error("demonstration id {0} repeated in context")]
    RepeatedId(usize),

    #[error("requested {k} demonstrations from a corpus of {n}")]
    TooManyDemos { k: usize, n: usize },

    #[error("policy cannot supply {wanted} distinct actions (only {available} unmasked)")]
    InsufficientActions { wanted: usize, available: usize },

    #[error("oracle enumeration of {count} tuples exceeds the limit {limit}; use a smaller N or k")]
    OracleTooLarge { count: u128, limit: u128 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint version mismatch: file has {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: usize, diagnostics: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-parseable CLI failures.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyActionSpace => "empty_action_space",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::InvalidId { .. } => "invalid_id",
            Error::RepeatedId(_) => "repeated_id",
            Error::TooManyDemos { .. } => "too_many_demos",
            Error::InsufficientActions { .. } => "insufficient_actions",
            Error::OracleTooLarge { .. } => "oracle_too_large",
            Error::Parse { .. } => "parse",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
