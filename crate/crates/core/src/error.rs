use thiserror::Error;

use crate::estimation::FitResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("correlation requested between parameters {0} and {1} but at least one of them is not random")]
    OffdiagWithoutDiag(usize, usize),

    #[error("invalid covariance pattern: {0}")]
    InvalidPattern(String),

    #[error("{model}: {message}")]
    Domain { model: &'static str, message: String },

    #[error("two-compartment rate constants are numerically indistinct (discriminant {discriminant:e})")]
    DegenerateEigenvalues { discriminant: f64 },

    #[error("non-finite likelihood for subject `{subject}` at observation {index}")]
    NonFiniteLikelihood { subject: String, index: usize },

    #[error("empirical Bayes mode for subject `{subject}` did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    InnerNonConvergence {
        subject: String,
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("quadrature grid of {size} nodes exceeds the cap of {cap}")]
    GridTooLarge { size: u128, cap: usize },

    #[error("non-positive variance parameter: {0}")]
    NonPositiveVariance(String),

    #[error("optimizer stopped after {iterations} iterations without converging")]
    MaxIterations {
        iterations: usize,
        partial: Box<FitResult>,
    },

    #[error("objective is not finite at the initial value")]
    NonFiniteObjective,

    #[error("{count} covariance structures requested for d = {d}, cap is {cap}")]
    TooManyStructures { d: usize, count: usize, cap: usize },

    #[error("covariate `{0}` is not present in the dataset")]
    MissingCovariate(String),

    #[error("regressor `{0}` required by the structural model is not present in the dataset")]
    MissingRegressor(String),

    #[error("unknown structural model `{0}`")]
    UnknownModel(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
