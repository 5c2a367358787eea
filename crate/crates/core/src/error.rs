use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported file version {0}")]
    UnsupportedVersion(u32),
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("climatology slot {0} has no samples")]
    EmptySlot(usize),
    #[error("no climatology slot for model hour {0}")]
    MissingSlot(i64),
    #[error("integration blew up at model hour {0}")]
    NonFiniteBlowup(i64),
    #[error("non-finite training loss")]
    NonFiniteLoss,
    #[error("non-finite cost")]
    NonFiniteCost,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("line search found no descent step at iteration {0}")]
    LineSearchFailed(usize),
    #[error("no trained model for stream {0}")]
    MissingModel(String),
    #[error("non-finite state in cycle {0}")]
    NonFiniteState(usize),
    #[error("evaluation set is empty")]
    EmptyEval,
    #[error("anomaly field has zero weighted norm")]
    DegenerateAnomaly,
    #[error("forecast is never skillful")]
    NeverSkillful,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
