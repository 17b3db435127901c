use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("observation outside the sample space: {0}")]
    InvalidObservation(String),

    #[error("mean parameter outside the interior of the mean range: {0}")]
    MeanOutOfRange(String),

    #[error("ising model has {0} vertices; exact enumeration supports at most 20")]
    IsingTooLarge(usize),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("box has no strong-convexity certificate")]
    Uncertified,

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("channel {channel} is incompatible with the {family} family")]
    IncompatibleChannel { channel: String, family: String },

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("invalid label {0}; labels are -1 or +1")]
    InvalidLabel(i64),

    #[error("invalid hedge parameters: {0}")]
    InvalidHedge(String),

    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("feedback source failed: {0}")]
    Feedback(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
