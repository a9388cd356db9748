use thiserror::Error;

pub type Result<T> = std::result::Result<T, FmmError>;

#[derive(Debug, Error)]
pub enum FmmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("target sparsity violated: {nonzero} subjects carry random-effect weights (limit {limit})")]
    SparsityViolation { nonzero: usize, limit: usize },

    #[error("ill-conditioned covariance: {0}")]
    IllConditioned(String),

    #[error("rank-deficient normal matrix (smallest pivot {pivot:e})")]
    RankDeficient { pivot: f64 },

    #[error("root not bracketed on [{lo:e}, {hi:e}] (scores {f_lo:e}, {f_hi:e})")]
    RootNotBracketed { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("fit did not converge after {iterations} iterations (last deltas: theta {delta_theta:e}, sigma_e2 {delta_sigma:e}, random cov {delta_omega:e})")]
    NotConverged {
        iterations: usize,
        delta_theta: f64,
        delta_sigma: f64,
        delta_omega: f64,
    },

    #[error("degenerate smoothing update for random component {0}: zero denominator")]
    DegenerateSmoothing(usize),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("jacobian of the variance score is singular")]
    SingularJacobian,

    #[error("invalid MSE value {0:e}")]
    InvalidMse(f64),

    #[error("incompatible model and request: {0}")]
    Incompatible(String),

    #[error("too many failed replicates: {failed} of {total}")]
    ReplicateFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
