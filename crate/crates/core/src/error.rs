use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("conjugate maximization did not converge: residual {residual:e} after {iterations} iterations")]
    Conjugate { residual: f64, iterations: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("orbit/process mismatch: {0}")]
    OrbitMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
