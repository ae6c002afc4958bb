use thiserror::Error;

/// Errors raised anywhere in the pipeline engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed dataset: {0}")]
    MalformedDataset(String),

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("episode exceeded {limit} steps without terminating")]
    RunawayEpisode { limit: usize },

    #[error("singular system at step {step}")]
    Singular { step: usize },

    #[error("column {column} has no observed values")]
    FullyMissingColumn { column: String },

    #[error("no fully observed row to impute from")]
    NoCompleteRow,

    #[error("not enough samples: need more than {k}, got {n}")]
    NotEnoughSamples { n: usize, k: usize },

    #[error("parameter divergence: |theta| = {magnitude:e} at epoch {epoch}")]
    Divergence { epoch: usize, magnitude: f64 },

    #[error("regressor fit failed at iteration {iteration}: {cause}")]
    RegressorFit { iteration: usize, cause: String },

    #[error("unknown hyper-parameter `{0}`")]
    UnknownHyperparam(String),

    #[error("hyper-parameter `{name}`: {reason}")]
    BadHyperparam { name: String, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("all {count} tuning evaluations failed")]
    TuningFailed { count: usize },

    #[error("stage {index} ({kind}) failed: {cause}")]
    Stage {
        index: usize,
        kind: String,
        cause: Box<Error>,
    },

    #[error("invalid pipeline: {}", .0.join("; "))]
    InvalidPipeline(Vec<String>),

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
