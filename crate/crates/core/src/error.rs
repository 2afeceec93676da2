use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid range: lower bound {lower} and upper bound {upper}")]
    InvalidRange { lower: usize, upper: usize },

    #[error("timer resolution {resolution:.3e} s is coarser than 1 ms")]
    TimerTooCoarse { resolution: f64 },

    #[error("measurement did not stabilise within {runs} runs")]
    BudgetExceeded { runs: usize },

    #[error("cannot allocate {requested} bytes (cap {cap} bytes)")]
    AllocationFailure { requested: usize, cap: usize },

    #[error("{0} not found in the tested range")]
    NotFound(&'static str),

    #[error("response curve has {measured} measured points, need at least 3")]
    DegenerateCurve { measured: usize },

    #[error("invalid simulator config: {0}")]
    ConfigInvalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::InvalidGeometry(msg.into())
    }
}
