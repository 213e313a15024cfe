use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("path bundle of {requested} values exceeds the memory cap of {cap} values")]
    ResourceExhausted { requested: usize, cap: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rank-deficient regression at time index {time_index} (condition number {condition:.3e})")]
    RankDeficient { time_index: usize, condition: f64 },

    #[error("bmo norm {alpha} is outside the reverse-Hölder range")]
    OutsideReverseHolderRange { alpha: f64 },

    #[error("Picard iteration did not converge after {iterations} iterations (last residual {last:.3e})")]
    NoConvergence {
        iterations: usize,
        last: f64,
        residuals: Vec<f64>,
    },

    #[error("Girsanov weights degenerate: effective sample size {ess:.1} < {threshold:.1}; use a shorter horizon or more paths")]
    WeightDegeneracy { ess: f64, threshold: f64 },

    #[error("driver matrix violates the equilibrium sparsity pattern at ({row}, {col})")]
    SparsityViolation { row: usize, col: usize },

    #[error("transcription mismatch in {check}: {mismatch:.3e}")]
    TranscriptionMismatch { check: String, mismatch: f64 },

    #[error("malformed path dump: {0}")]
    MalformedDump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
