use thiserror::Error;

/// Errors produced by model construction, design and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("Riccati solver failed: {reason} (residual {residual:.3e})")]
    Solver { reason: String, residual: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("spiking network unstable at step {step}: {reason}")]
    Instability { step: usize, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
