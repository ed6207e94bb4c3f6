//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("non-finite value in {context} at point {point:?}")]
    NonFinite { context: String, point: Vec<f64> },

    #[error("{0}")]
    Expr(#[from] crate::exprlang::ExprError),

    #[error("{what}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: String,
        index: usize,
        limit: usize,
    },

    #[error("state blow-up at step {step}: |x| = {norm:.3e} exceeds 1e8")]
    Divergence { step: usize, norm: f64 },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("driver resolution too coarse: step {actual:.3e} exceeds required {required:.3e}")]
    ResolutionTooCoarse { required: f64, actual: f64 },

    #[error("boundary scan failed: no point converged in {attempts} attempts")]
    ScanFailed { attempts: usize },

    #[error("insufficient samples for {what}: need {needed}, got {got}")]
    InsufficientSamples {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("{0}")]
    InvalidInput(String),
}
