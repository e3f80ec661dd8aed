use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown path kind `{0}`")]
    UnknownPath(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("singular schedule: c({t}) = 0, the conditional vector field needs sigma_min > 0")]
    SingularSchedule { t: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sequence too short: length {len}, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("explicit scheme unstable: ratio {ratio} exceeds bound {bound}")]
    Unstable { ratio: f64, bound: f64 },
    #[error("grid too coarse: dz = {dz} exceeds c_min / 10 = {limit}")]
    GridTooCoarse { dz: f64, limit: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("zero norm or variance in {0}")]
    Degenerate(&'static str),
    #[error("tensor file {path}: {reason}")]
    TensorFile { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
