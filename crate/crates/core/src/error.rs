use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unsupported dimension {0}: exact solver handles d <= 2")]
    UnsupportedDimension(usize),

    #[error("solver failure: {message} (iterate: w={w:?}, b={b})")]
    Solver { message: String, w: Vec<f64>, b: f64 },

    #[error("precision: mass {mass} needs denominator {denominator} beyond cap {cap}")]
    Precision { mass: f64, denominator: u64, cap: u64 },

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("self-training step failed: {0}")]
    Step(String),

    #[error("data error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
