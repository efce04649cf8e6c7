use thiserror::Error;

/// Crate-wide error type. Numerical routines return these rather than
/// panicking so the CLI can map failure classes onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("data length {got} does not fill {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("SVD did not converge")]
    SvdNonConvergence,

    #[error("input matrix is exactly zero")]
    ZeroMatrix,

    #[error("matrix is not orthogonal within {tol:.1e} (deviation {deviation:.3e})")]
    NotOrthogonal { deviation: f64, tol: f64 },

    #[error("blocks do not match the isotypic layout: {0}")]
    SpecMismatch(String),

    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("forward cache does not match the model or batch: {0}")]
    StaleCache(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("invalid argument: {0}")]
    BadFlag(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
