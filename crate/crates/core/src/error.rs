use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Param { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {value} at node (i={i}, j={j}) in {context}")]
    NonFinite { context: String, i: usize, j: usize, value: f64 },

    #[error("density not positive: minimum {min} at node (i={i}, j={j})")]
    NonPositiveDensity { min: f64, i: usize, j: usize },

    #[error("Neumann condition violated: |u_x| = {slope:e} at x = {x}, t = {t}")]
    Neumann { slope: f64, x: f64, t: f64 },

    #[error("initial gradient is zero; the start state is already stationary")]
    ZeroInitialGradient,

    #[error("{0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err<T>(name: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Param { name, reason: reason.into() })
}
