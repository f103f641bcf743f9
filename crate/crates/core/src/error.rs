use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("mesh is not aligned with the measurement lattice")]
    UnalignedMesh,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("ensemble of size {0} is too small (need at least 2)")]
    EnsembleTooSmall(usize),
    #[error("nonlinear solve did not converge: residual {residual:.3e} after {iterations} iterations (sub-step {step})")]
    NonConvergence { residual: f64, iterations: usize, step: usize },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("reduced space is empty; no surrogate can be built")]
    DegenerateSpace,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("archive is empty")]
    EmptyArchive,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
