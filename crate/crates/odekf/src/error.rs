use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter {index} = {value} outside domain [{lo}, {hi}]")]
    ParameterOutOfRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration diverged at node {node} (t = {t})")]
    Divergence { node: usize, t: f64 },

    #[error("ill-posed spline fit: {0}")]
    IllPosedFit(String),

    #[error("observability failure (condition C2a): {0}")]
    Observability(String),

    #[error("optimizer failed to converge: {0}")]
    NonConvergence(String),

    #[error("quadratic problem is not uniquely solvable: {0}")]
    NonUnique(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown model '{0}'")]
    UnknownModel(String),

    #[error("unknown estimator '{0}'")]
    UnknownEstimator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
