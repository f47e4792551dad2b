//! Model definitions and parameter-dimension accounting.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pattern::{count_vec_omega, validate_pattern, CovariancePattern, ValidatedPattern};
use crate::structural::{ErrorKind, StructuralModel};

/// Map between the natural parameter scale and the Gaussian scale on which
/// `C_i β + η_i` lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Log,
    Logit,
}

impl Transform {
    /// Natural value -> Gaussian-scale value.
    pub fn forward(self, natural: f64) -> f64 {
        match self {
            Transform::Identity => natural,
            Transform::Log => natural.ln(),
            Transform::Logit => (natural / (1.0 - natural)).ln(),
        }
    }

    /// Gaussian-scale value -> natural value.
    #[inline]
    pub fn inverse(self, phi: f64) -> f64 {
        match self {
            Transform::Identity => phi,
            Transform::Log => phi.exp(),
            Transform::Logit => 1.0 / (1.0 + (-phi).exp()),
        }
    }

    /// Natural value and `d natural / d phi`.
    #[inline]
    pub fn inverse_with_derivative(self, phi: f64) -> (f64, f64) {
        match self {
            Transform::Identity => (phi, 1.0),
            Transform::Log => {
                let e = phi.exp();
                (e, e)
            }
            Transform::Logit => {
                let p = 1.0 / (1.0 + (-phi).exp());
                (p, p * (1.0 - p))
            }
        }
    }
}

impl std::str::FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "normal" => Ok(Transform::Identity),
            "log" | "lognormal" => Ok(Transform::Log),
            "logit" => Ok(Transform::Logit),
            other => Err(Error::input(format!("unknown transform `{other}`"))),
        }
    }
}

/// Covariates entering each parameter's linear predictor, in order. The
/// intercept is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovariateMap {
    per_param: Vec<Vec<String>>,
}

impl CovariateMap {
    pub fn new(per_param: Vec<Vec<String>>) -> Result<Self> {
        for (k, list) in per_param.iter().enumerate() {
            for (i, c) in list.iter().enumerate() {
                if list[..i].contains(c) {
                    return Err(Error::input(format!(
                        "covariate `{c}` listed twice for parameter {k}"
                    )));
                }
            }
        }
        Ok(Self { per_param })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            per_param: vec![Vec::new(); d],
        }
    }

    /// Every covariate of `pool` on every parameter (or on `params` only).
    pub fn full(d: usize, pool: &[String], params: Option<&[usize]>) -> Self {
        let mut pool = pool.to_vec();
        pool.sort();
        let per_param = (0..d)
            .map(|k| match params {
                Some(p) if !p.contains(&k) => Vec::new(),
                _ => pool.clone(),
            })
            .collect();
        Self { per_param }
    }

    pub fn len(&self) -> usize {
        self.per_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_param.is_empty()
    }

    pub fn covariates(&self, k: usize) -> &[String] {
        &self.per_param[k]
    }

    pub fn per_param(&self) -> &[Vec<String>] {
        &self.per_param
    }

    pub fn n_covariate_terms(&self) -> usize {
        self.per_param.iter().map(Vec::len).sum()
    }

    /// Same map with every list sorted by name.
    pub fn canonical(&self) -> Self {
        let mut m = self.clone();
        for l in &mut m.per_param {
            l.sort();
        }
        m
    }

    pub fn contains(&self, k: usize, name: &str) -> bool {
        self.per_param[k].iter().any(|c| c == name)
    }

    pub fn with_added(&self, k: usize, name: &str) -> Self {
        let mut m = self.clone();
        m.per_param[k].push(name.to_string());
        m.per_param[k].sort();
        m
    }

    pub fn with_removed(&self, k: usize, name: &str) -> Self {
        let mut m = self.clone();
        m.per_param[k].retain(|c| c != name);
        m
    }
}

/// Counts feeding the hybrid penalties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaDims {
    pub dim_beta_r: usize,
    pub dim_beta_f: usize,
    pub dim_vec_omega: usize,
    pub dim_error: usize,
}

impl ThetaDims {
    /// Parameters tied to random components (penalized by log N).
    pub fn dim_theta_r(&self) -> usize {
        self.dim_beta_r + self.dim_vec_omega
    }

    /// Purely fixed parameters, including residual-error parameters
    /// (penalized by log n_tot).
    pub fn dim_theta_f(&self) -> usize {
        self.dim_beta_f + self.dim_error
    }

    pub fn dim_theta(&self) -> usize {
        self.dim_theta_r() + self.dim_theta_f()
    }
}

/// Structural model, transforms, covariate map, covariance pattern and
/// residual error model. Immutable once built.
#[derive(Clone)]
pub struct ModelSpec {
    structural: Arc<dyn StructuralModel>,
    transforms: Vec<Transform>,
    covmap: CovariateMap,
    pattern: ValidatedPattern,
    error: ErrorKind,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("structural", &self.structural.name())
            .field("summary", &self.summary())
            .field("transforms", &self.transforms)
            .field("error", &self.error)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        structural: Arc<dyn StructuralModel>,
        transforms: Vec<Transform>,
        covmap: CovariateMap,
        pattern: CovariancePattern,
        error: ErrorKind,
    ) -> Result<Self> {
        let d = structural.arity();
        if transforms.len() != d || covmap.len() != d || pattern.d() != d {
            return Err(Error::Dimension(format!(
                "{} has {d} parameters but transforms/covariates/pattern have {}/{}/{}",
                structural.name(),
                transforms.len(),
                covmap.len(),
                pattern.d()
            )));
        }
        let pattern = validate_pattern(pattern)?;
        Ok(Self {
            structural,
            transforms,
            covmap,
            pattern,
            error,
        })
    }

    pub fn structural(&self) -> &Arc<dyn StructuralModel> {
        &self.structural
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn covmap(&self) -> &CovariateMap {
        &self.covmap
    }

    pub fn pattern(&self) -> &ValidatedPattern {
        &self.pattern
    }

    pub fn error_kind(&self) -> ErrorKind {
        self.error
    }

    pub fn d(&self) -> usize {
        self.transforms.len()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.structural.parameter_names()
    }

    pub fn with_pattern(&self, pattern: CovariancePattern) -> Result<Self> {
        Self::new(
            self.structural.clone(),
            self.transforms.clone(),
            self.covmap.clone(),
            pattern,
            self.error,
        )
    }

    pub fn with_covmap(&self, covmap: CovariateMap) -> Result<Self> {
        Self::new(
            self.structural.clone(),
            self.transforms.clone(),
            covmap,
            self.pattern.clone().into_inner(),
            self.error,
        )
    }

    /// Number of β entries: one intercept per parameter plus covariate terms.
    pub fn n_beta(&self) -> usize {
        self.d() + self.covmap.n_covariate_terms()
    }

    /// Offset of parameter `k`'s intercept within the flat β vector.
    pub fn beta_offset(&self, k: usize) -> usize {
        (0..k).map(|j| 1 + self.covmap.covariates(j).len()).sum()
    }

    /// Every covariate and regressor the model needs is present.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        for list in self.covmap.per_param() {
            for c in list {
                if dataset.covariate_index(c).is_none() {
                    return Err(Error::MissingCovariate(c.clone()));
                }
            }
        }
        for r in self.structural.regressor_names() {
            if dataset.regressor_index(&r).is_none() {
                return Err(Error::MissingRegressor(r));
            }
        }
        Ok(())
    }

    /// Compact description such as `re{ka,V}[ka~V] cov{ka(-) k(wt) V(-)}`.
    pub fn summary(&self) -> String {
        model_summary(&self.parameter_names(), &self.pattern, &self.covmap)
    }

    pub fn n_params(&self) -> usize {
        theta_dims(self).dim_theta()
    }
}

pub fn pattern_summary(names: &[String], pattern: &CovariancePattern) -> String {
    let random: Vec<&str> = pattern
        .random_indices()
        .into_iter()
        .map(|k| names[k].as_str())
        .collect();
    let mut s = format!("re{{{}}}", random.join(","));
    let pairs = pattern.correlated_pairs();
    if !pairs.is_empty() {
        let p: Vec<String> = pairs
            .iter()
            .map(|&(k, l)| format!("{}~{}", names[k], names[l]))
            .collect();
        s.push_str(&format!("[{}]", p.join(",")));
    }
    s
}

pub fn covmap_summary(names: &[String], covmap: &CovariateMap) -> String {
    let parts: Vec<String> = names
        .iter()
        .zip(covmap.per_param())
        .map(|(n, cs)| {
            if cs.is_empty() {
                format!("{n}(-)")
            } else {
                format!("{n}({})", cs.join(","))
            }
        })
        .collect();
    format!("cov{{{}}}", parts.join(" "))
}

pub fn model_summary(names: &[String], pattern: &CovariancePattern, covmap: &CovariateMap) -> String {
    format!(
        "{} {}",
        pattern_summary(names, pattern),
        covmap_summary(names, &covmap.canonical())
    )
}

pub fn theta_dims(spec: &ModelSpec) -> ThetaDims {
    let mut dims = ThetaDims {
        dim_beta_r: 0,
        dim_beta_f: 0,
        dim_vec_omega: count_vec_omega(spec.pattern()),
        dim_error: spec.error_kind().n_params(),
    };
    for k in 0..spec.d() {
        let n = 1 + spec.covmap().covariates(k).len();
        if spec.pattern().is_random(k) {
            dims.dim_beta_r += n;
        } else {
            dims.dim_beta_f += n;
        }
    }
    dims
}
