use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("ellipticity violated at ({x:.6}, {y:.6}): smallest eigenvalue {min_eigenvalue:e} < alpha {alpha:e}")]
    InvalidCoefficients {
        x: f64,
        y: f64,
        min_eigenvalue: f64,
        alpha: f64,
    },

    #[error("ill-posed boundary value problem: {0}")]
    IllPosedBvp(String),

    #[error("linear solver failed: {reason} (relative residual {residual:e})")]
    SolverFailure { reason: String, residual: f64 },

    #[error("nonlinear iteration did not converge in {} steps (last update {:e})", history.len(), history.last().copied().unwrap_or(f64::NAN))]
    NonlinearDivergence { history: Vec<f64> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid comparison: {0}")]
    InvalidComparison(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
