use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("singular KKT system (reciprocal condition estimate {rcond:.3e})")]
    SingularKkt { rcond: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("infeasible equality constraints: {0}")]
    Infeasible(String),

    #[error("non-finite objective or gradient encountered: {0}")]
    NonFinite(String),

    #[error("system is not stable (spectral radius {0:.6})")]
    Unstable(f64),

    #[error("unobservable pair (A, C): observability rank {rank} < {n_x}")]
    Unobservable { rank: usize, n_x: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory too short: need {needed} samples, have {have}")]
    TooShort { needed: usize, have: usize },

    #[error("matrix of size {size} exceeds the materialization cap {cap}")]
    SizeCap { size: usize, cap: usize },

    #[error("failed to generate a random system after {0} attempts")]
    GenerationFailed(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
