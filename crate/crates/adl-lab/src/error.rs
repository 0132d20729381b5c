use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the toolkit.
///
/// [`Error::Infeasible`] and [`Error::DataQuality`] are kept distinct so that
/// callers (the CLI in particular) can map them onto separate exit codes.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("time index {index} outside path of length {len}")]
    Bounds { index: usize, len: usize },
    #[error("funding rate undefined: short open interest is zero")]
    UndefinedRate,
    #[error("undefined ratio: {0} is zero")]
    UndefinedRatio(&'static str),
    #[error("insufficient depth: requested {requested}, available {available}")]
    Liquidity { requested: f64, available: f64 },
    #[error("infeasible allocation: budget {budget} exceeds capacity {capacity}")]
    Infeasible { budget: f64, capacity: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("data quality: {0}")]
    DataQuality(String),
    #[error("input error: {0}")]
    Input(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
