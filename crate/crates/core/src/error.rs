use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("coordinate {coord} outside periodic domain [0, {length})")]
    OutOfDomain { coord: f64, length: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("belief does not match model: {0}")]
    BeliefMismatch(String),

    #[error("eigen-iteration did not converge (relative residual {residual:.3e})")]
    NotConverged { residual: f64 },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("solver blow-up at step {step}: max |u| = {max_abs:.3e}")]
    BlowUp { step: usize, max_abs: f64 },

    #[error("linear algebra failure: {0}")]
    LinAlg(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
