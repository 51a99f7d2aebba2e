use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("dimension mismatch: {0}")]
    DimensionError(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    /// `group` is set when the failure comes from one block of a clustered model.
    #[error("matrix is not positive definite{}: {detail}", group.map(|g| format!(" (group {g})")).unwrap_or_default())]
    NotSpd { group: Option<usize>, detail: String },

    #[error("rank deficient: numerical rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid regime: {0}")]
    InvalidRegime(String),

    #[error("too many rank-deficient design draws: {resampled} of {requested}")]
    ResampleLimit { resampled: usize, requested: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("result file error at line {line}: {msg}")]
    ResultFormat { line: usize, msg: String },
}

impl Error {
    pub(crate) fn not_spd(detail: impl Into<String>) -> Self {
        Error::NotSpd {
            group: None,
            detail: detail.into(),
        }
    }
}
