//! Nonlinear mixed-effects models: fitting by Laplace or adaptive
//! Gauss–Hermite likelihoods, hybrid BIC criteria, stepwise selection of
//! covariates and random-effects covariance structure, and simulation.

pub mod criteria;
pub mod data;
pub mod doc;
pub mod dual;
pub mod error;
pub mod estimation;
pub mod likelihood;
pub mod model;
pub mod optim;
pub mod pattern;
pub mod quadrature;
pub mod seed;
pub mod selection;
pub mod sim;
pub mod structural;
pub mod theta;

pub use criteria::{criterion, criterion_from_parts, CriterionKind, CriterionValue};
pub use data::{Dataset, Observation, Subject};
pub use error::{Error, Result};
pub use estimation::{default_init, fit_ml, FitOptions, FitResult, ParameterEstimate};
pub use likelihood::{
    conditional_loglik, eb_mode, eb_mode_from, marginal_gradient, marginal_loglik_agq, marginal_loglik_laplace, EBResult,
};
pub use model::{theta_dims, CovariateMap, ModelSpec, ThetaDims, Transform};
pub use pattern::{count_vec_omega, validate_pattern, CovariancePattern, ValidatedPattern};
pub use structural::{ErrorKind, ErrorModelSpec, ModelRegistry, StructuralModel};
pub use theta::{pack, unpack, ThetaVector};
