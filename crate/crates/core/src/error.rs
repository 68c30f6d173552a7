use thiserror::Error;

/// Failures raised by model backends behind the gateway.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend `{backend_id}` timed out after {attempts} attempt(s)")]
    Timeout { backend_id: String, attempts: u32 },
    #[error("backend `{backend_id}` transport failure: {message}")]
    Transport { backend_id: String, message: String },
    #[error("backend `{backend_id}` returned an error: {message}")]
    Remote { backend_id: String, message: String },
    #[error("unparseable response from `{backend_id}`: {reason}; raw text: {raw:?}")]
    Parse {
        backend_id: String,
        reason: String,
        raw: String,
    },
    #[error("backend `{backend_id}` returned an out-of-range score {score}")]
    ScoreOutOfRange { backend_id: String, score: f64 },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Timeout { .. })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("no stored ECR trace for candidate `{0}`")]
    MissingEcr(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("candidate `{candidate_id}`: {source}")]
    Candidate {
        candidate_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("mining aborted: {failed} of {attempted} queries failed (limit {limit:.3})")]
    FailureRatioExceeded {
        failed: usize,
        attempted: usize,
        limit: f64,
    },
    #[error("interrupted")]
    Interrupted,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
