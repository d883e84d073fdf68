use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },
    #[error("adapter for {target} has shape ({got_m}, {got_n}), matrix is ({m}, {n})")]
    AdapterShape { target: String, m: usize, n: usize, got_m: usize, got_n: usize },
    #[error("adapter target {0} does not exist in the model")]
    TargetMismatch(String),
    #[error("adapter for category `{category}` is missing a pair for {target}")]
    IncompleteAdapter { category: String, target: String },
    #[error("adapter banks are not congruent: {0}")]
    IncongruentBanks(String),
    #[error("invalid indicator: {0}")]
    Indicator(String),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("attribute `{0}` selected more than once")]
    DuplicateAttribute(String),
    #[error("unknown condition id {0}")]
    UnknownCondition(usize),
    #[error("unknown condition token `{0}`")]
    UnknownToken(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("gradient tape was already consumed by a backward pass")]
    StaleTape,
    #[error("timestep {t} out of range for a {steps}-step schedule")]
    Timestep { t: usize, steps: usize },
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("non-finite latent at sampler step {step}")]
    Divergence { step: usize },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
    #[error("run directory {0} is locked by another process")]
    Locked(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }
}
