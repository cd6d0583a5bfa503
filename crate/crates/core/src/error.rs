use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants fall into two broad classes, validation problems with the input
/// (`is_numerical() == false`) and numerical failures during fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("point {point} lies outside the basis range [{lower}, {upper}]")]
    OutOfRange { point: f64, lower: f64, upper: f64 },

    #[error("empty history: no covariate grid point lies inside the integration limits for any response time")]
    EmptyHistory,

    #[error("factor level '{level}' of '{factor}' has no observations")]
    EmptyLevel { factor: String, level: String },

    #[error("unknown level '{level}' for categorical covariate '{factor}'")]
    UnknownLevel { factor: String, level: String },

    #[error("unknown variable '{0}'")]
    UnknownVariable(String),

    #[error("degrees of freedom {target} not attainable; attainable range is ({min}, {max}]")]
    DfUnattainable { target: f64, min: f64, max: f64 },

    #[error("rank deficient system: {0}")]
    RankDeficient(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("resampling fold {0} contains no observation units")]
    EmptyFold(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical pipeline (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DfUnattainable { .. } | Error::RankDeficient(_) | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
