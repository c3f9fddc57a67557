use thiserror::Error;

/// Errors raised by the solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },
    #[error("no sign change of {what} on [{lo}, {hi}]")]
    NoBracket {
        what: &'static str,
        lo: f64,
        hi: f64,
    },
    #[error("unknown vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("singular linear system: {0}")]
    Singular(&'static str),
    #[error("continuation failed at lambda = {lambda}: {reason}")]
    Continuation { lambda: f64, reason: String },
    #[error("{0}")]
    Scenario(String),
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
