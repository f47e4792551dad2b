//! TOML documents: model definitions, parameter values, search and
//! study configurations.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::criteria::CriterionKind;
use crate::error::{Error, Result};
use crate::estimation::FitOptions;
use crate::model::{CovariateMap, ModelSpec, Transform};
use crate::pattern::CovariancePattern;
use crate::selection::{enumerate_cov_structures_with_cap, CovMode, SearchStart, StepwiseOptions};
use crate::sim::{Candidate, McConfig, SimDesign};
use crate::structural::{ErrorKind, ModelRegistry};
use crate::theta::ThetaVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterDoc {
    pub name: String,
    #[serde(default = "default_transform")]
    pub transform: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "yes")]
    pub random: bool,
    /// Initial typical value, natural scale.
    #[serde(default)]
    pub typical: Option<f64>,
    /// Initial random-effect standard deviation (transformed scale).
    #[serde(default)]
    pub sd: Option<f64>,
}

fn default_transform() -> String {
    "log".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorDoc {
    pub kind: String,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceDoc {
    /// Pairs of parameter names whose random effects are correlated.
    #[serde(default)]
    pub correlated: Vec<[String; 2]>,
}

/// Model definition document.
///
/// ```toml
/// structural = "onecpt_oral"
///
/// [[parameter]]
/// name = "ka"
/// transform = "log"
/// covariates = ["wt"]
/// random = true
/// typical = 1.0
/// sd = 0.2
///
/// [error]
/// kind = "additive"
/// a = 0.3
///
/// [covariance]
/// correlated = [["ka", "V"]]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub structural: String,
    #[serde(rename = "parameter")]
    pub parameters: Vec<ParameterDoc>,
    pub error: ErrorDoc,
    #[serde(default)]
    pub covariance: CovarianceDoc,
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::input(format!("{what}: {e}")))
}

impl ModelDoc {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text, "model definition")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model documents serialize")
    }

    /// Parameter documents in the structural model's order.
    fn ordered(&self, names: &[String]) -> Result<Vec<&ParameterDoc>> {
        for p in &self.parameters {
            if !names.contains(&p.name) {
                return Err(Error::input(format!(
                    "parameter `{}` is not a parameter of the structural model (expected one of {})",
                    p.name,
                    names.join(", ")
                )));
            }
        }
        names
            .iter()
            .map(|n| {
                let found: Vec<&ParameterDoc> = self.parameters.iter().filter(|p| &p.name == n).collect();
                match found.len() {
                    1 => Ok(found[0]),
                    0 => Err(Error::input(format!("parameter `{n}` is missing from the model document"))),
                    _ => Err(Error::input(format!("parameter `{n}` is listed more than once"))),
                }
            })
            .collect()
    }

    pub fn to_spec(&self, registry: &ModelRegistry) -> Result<ModelSpec> {
        let structural = registry.get(&self.structural)?;
        let names = structural.parameter_names();
        let params = self.ordered(&names)?;
        let transforms = params
            .iter()
            .map(|p| {
                p.transform
                    .parse::<Transform>()
                    .map_err(|e| Error::input(format!("parameter `{}`: {e}", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let covmap = CovariateMap::new(params.iter().map(|p| p.covariates.clone()).collect())?;
        let mut pattern = CovariancePattern::diagonal(params.iter().map(|p| p.random).collect());
        for [a, b] in &self.covariance.correlated {
            let ia = names
                .iter()
                .position(|n| n == a)
                .ok_or_else(|| Error::input(format!("covariance.correlated: unknown parameter `{a}`")))?;
            let ib = names
                .iter()
                .position(|n| n == b)
                .ok_or_else(|| Error::input(format!("covariance.correlated: unknown parameter `{b}`")))?;
            if ia == ib {
                return Err(Error::input(format!("covariance.correlated: `{a}` paired with itself")));
            }
            pattern.set_correlation(ia, ib, true);
        }
        let error: ErrorKind = self
            .error
            .kind
            .parse()
            .map_err(|e| Error::input(format!("error.kind: {e}")))?;
        ModelSpec::new(structural, transforms, covmap, pattern, error)
    }

    /// Starting value if every parameter has a `typical` entry; random-effect
    /// SDs default to 0.3, `a` to 1 and `b` to 0.1.
    pub fn init_theta(&self, spec: &ModelSpec) -> Result<Option<ThetaVector>> {
        let names = spec.parameter_names();
        let params = self.ordered(&names)?;
        if params.iter().any(|p| p.typical.is_none()) {
            return Ok(None);
        }
        let theta = ThetaDoc {
            parameters: params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        ParameterValueDoc {
                            typical: p.typical.expect("checked above"),
                            sd: p.random.then(|| p.sd.unwrap_or(0.3)),
                            coefficients: BTreeMap::new(),
                        },
                    )
                })
                .collect(),
            correlation: Vec::new(),
            error: ErrorValueDoc {
                a: Some(self.error.a.unwrap_or(1.0)),
                b: Some(self.error.b.unwrap_or(0.1)),
            },
        };
        theta.to_theta(spec).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterValueDoc {
    /// Typical value on the natural scale.
    pub typical: f64,
    /// Random-effect standard deviation on the transformed scale.
    #[serde(default)]
    pub sd: Option<f64>,
    /// Covariate coefficients on the transformed scale.
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationDoc {
    pub pair: [String; 2],
    /// Correlation coefficient.
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorValueDoc {
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
}

/// Parameter values for a spec.
///
/// ```toml
/// [parameters.ka]
/// typical = 1.0
/// sd = 0.2
///
/// [parameters.V]
/// typical = 20.0
/// sd = 0.3
/// coefficients = { wt = 0.8 }
///
/// [[correlation]]
/// pair = ["ka", "V"]
/// value = 0.5
///
/// [error]
/// a = 0.3
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaDoc {
    pub parameters: BTreeMap<String, ParameterValueDoc>,
    #[serde(default)]
    pub correlation: Vec<CorrelationDoc>,
    #[serde(default)]
    pub error: ErrorValueDoc,
}

impl ThetaDoc {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text, "parameter values")
    }

    pub fn to_theta(&self, spec: &ModelSpec) -> Result<ThetaVector> {
        let names = spec.parameter_names();
        for n in self.parameters.keys() {
            if !names.contains(n) {
                return Err(Error::input(format!("parameters.{n}: not a parameter of the model")));
            }
        }
        let mut beta = Vec::with_capacity(spec.n_beta());
        let mut sds = Vec::new();
        for (k, n) in names.iter().enumerate() {
            let p = self
                .parameters
                .get(n)
                .ok_or_else(|| Error::input(format!("parameters.{n}: missing")))?;
            let t = spec.transforms()[k];
            let phi = t.forward(p.typical);
            if !phi.is_finite() {
                return Err(Error::input(format!(
                    "parameters.{n}.typical: {} is outside the domain of the {t:?} transform",
                    p.typical
                )));
            }
            beta.push(phi);
            for c in p.coefficients.keys() {
                if !spec.covmap().contains(k, c) {
                    return Err(Error::input(format!(
                        "parameters.{n}.coefficients: `{c}` is not a covariate of `{n}` in the model"
                    )));
                }
            }
            for c in spec.covmap().covariates(k) {
                beta.push(p.coefficients.get(c).copied().unwrap_or(0.0));
            }
            if spec.pattern().is_random(k) {
                let sd = p
                    .sd
                    .ok_or_else(|| Error::input(format!("parameters.{n}.sd: required for a random parameter")))?;
                sds.push(sd);
            } else if p.sd.is_some_and(|s| s != 0.0) {
                return Err(Error::input(format!("parameters.{n}.sd: `{n}` has no random effect in the model")));
            }
        }
        let idx = spec.pattern().random_indices();
        let mut omega = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            sds.len(),
            sds.iter().map(|s| s * s),
        ));
        for c in &self.correlation {
            let [a, b] = &c.pair;
            let ka = names.iter().position(|n| n == a);
            let kb = names.iter().position(|n| n == b);
            let (Some(ka), Some(kb)) = (ka, kb) else {
                return Err(Error::input(format!("correlation.pair: unknown parameter in [{a}, {b}]")));
            };
            if !spec.pattern().is_correlated(ka, kb) {
                return Err(Error::input(format!(
                    "correlation.pair: `{a}` and `{b}` are not correlated in the model"
                )));
            }
            let r = idx.iter().position(|&x| x == ka).expect("correlated implies random");
            let s = idx.iter().position(|&x| x == kb).expect("correlated implies random");
            let v = c.value * sds[r] * sds[s];
            omega[(r, s)] = v;
            omega[(s, r)] = v;
        }
        let get = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::input(format!("error.{name}: required")));
        let error = match spec.error_kind() {
            ErrorKind::Additive => vec![get(self.error.a, "a")?],
            ErrorKind::Proportional => vec![get(self.error.b, "b")?],
            ErrorKind::Combined => vec![get(self.error.a, "a")?, get(self.error.b, "b")?],
        };
        ThetaVector::from_omega(spec, beta, &omega, error)
    }
}

fn default_criterion() -> String {
    "bic_joint".into()
}

fn default_cov_mode() -> String {
    "diagonal".into()
}

fn default_direction() -> String {
    "forward".into()
}

fn default_nodes() -> usize {
    1
}

fn default_max_steps() -> usize {
    50
}

fn default_tol() -> f64 {
    1e-6
}

fn parse_cov_mode(mode: &str, random: &[String], names: &[String]) -> Result<CovMode> {
    match mode {
        "diagonal" => Ok(CovMode::DiagonalOnly),
        "full" => Ok(CovMode::Full),
        "fixed_diagonal" => Ok(CovMode::FixedDiagonal(
            random
                .iter()
                .map(|r| {
                    names
                        .iter()
                        .position(|n| n == r)
                        .ok_or_else(|| Error::input(format!("random: unknown parameter `{r}`")))
                })
                .collect::<Result<_>>()?,
        )),
        other => Err(Error::input(format!(
            "cov_mode: unknown mode `{other}` (expected diagonal, full or fixed_diagonal)"
        ))),
    }
}

/// Stepwise search configuration. The embedded model gives the structural
/// model, transforms, error model, starting covariance pattern and (for
/// `direction = "user"`) the starting covariate map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchDoc {
    pub model: ModelDoc,
    pub pool: Vec<String>,
    #[serde(default = "default_criterion")]
    pub criterion: String,
    #[serde(default = "default_direction")]
    pub direction: String,
    #[serde(default = "default_cov_mode")]
    pub cov_mode: String,
    /// Random set for `cov_mode = "fixed_diagonal"`.
    #[serde(default)]
    pub random: Vec<String>,
    /// Parameters allowed to take covariates; empty means all.
    #[serde(default)]
    pub covariate_parameters: Vec<String>,
    #[serde(default)]
    pub refine_correlations: bool,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl SearchDoc {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text, "search configuration")
    }

    pub fn criterion(&self) -> Result<CriterionKind> {
        self.criterion.parse()
    }

    /// Base spec, search options (with `direction` overridable).
    pub fn build(
        &self,
        registry: &ModelRegistry,
        direction: Option<&str>,
    ) -> Result<(ModelSpec, StepwiseOptions)> {
        let spec = self.model.to_spec(registry)?;
        let names = spec.parameter_names();
        let start = match direction.unwrap_or(&self.direction) {
            "forward" => SearchStart::Forward,
            "backward" => SearchStart::Backward,
            "user" => SearchStart::User(spec.covmap().clone()),
            other => {
                return Err(Error::input(format!(
                    "direction: unknown value `{other}` (expected forward, backward or user)"
                )))
            }
        };
        let covariate_params = if self.covariate_parameters.is_empty() {
            None
        } else {
            Some(
                self.covariate_parameters
                    .iter()
                    .map(|p| {
                        names
                            .iter()
                            .position(|n| n == p)
                            .ok_or_else(|| Error::input(format!("covariate_parameters: unknown parameter `{p}`")))
                    })
                    .collect::<Result<_>>()?,
            )
        };
        let opts = StepwiseOptions {
            start,
            cov_mode: parse_cov_mode(&self.cov_mode, &self.random, &names)?,
            covariate_params,
            tol: self.tol,
            max_steps: self.max_steps,
            refine_correlations: self.refine_correlations,
            fit: FitOptions {
                nodes: self.nodes,
                compute_se: false,
                ..FitOptions::default()
            },
            ..StepwiseOptions::default()
        };
        Ok((spec, opts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternDoc {
    #[serde(default)]
    pub name: Option<String>,
    pub random: Vec<String>,
    #[serde(default)]
    pub correlated: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatesDoc {
    /// `diagonal`, `full`, `fixed_diagonal` or `list`.
    pub mode: String,
    /// Random set for `fixed_diagonal`.
    #[serde(default)]
    pub random: Vec<String>,
    /// Explicit patterns for `list`.
    #[serde(default)]
    pub pattern: Vec<PatternDoc>,
}

/// Monte Carlo study configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDoc {
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_criterion")]
    pub criterion: String,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    pub design: SimDesign,
    /// The generating model.
    pub model: ModelDoc,
    pub truth: ThetaDoc,
    pub candidates: CandidatesDoc,
}

impl StudyDoc {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text, "study configuration")
    }

    pub fn to_config(&self, registry: &ModelRegistry) -> Result<McConfig> {
        let spec = self.model.to_spec(registry)?;
        let truth = self.truth.to_theta(&spec)?;
        let names = spec.parameter_names();
        let patterns: Vec<(Option<String>, CovariancePattern)> = match self.candidates.mode.as_str() {
            "list" => self
                .candidates
                .pattern
                .iter()
                .map(|p| {
                    let mut diag = vec![false; names.len()];
                    for r in &p.random {
                        let k = names
                            .iter()
                            .position(|n| n == r)
                            .ok_or_else(|| Error::input(format!("candidates.pattern.random: unknown parameter `{r}`")))?;
                        diag[k] = true;
                    }
                    let mut pat = CovariancePattern::diagonal(diag);
                    for [a, b] in &p.correlated {
                        let ka = names.iter().position(|n| n == a);
                        let kb = names.iter().position(|n| n == b);
                        let (Some(ka), Some(kb)) = (ka, kb) else {
                            return Err(Error::input(format!(
                                "candidates.pattern.correlated: unknown parameter in [{a}, {b}]"
                            )));
                        };
                        pat.set_correlation(ka, kb, true);
                    }
                    crate::pattern::validate_pattern(pat.clone())?;
                    Ok((p.name.clone(), pat))
                })
                .collect::<Result<_>>()?,
            mode => enumerate_cov_structures_with_cap(
                names.len(),
                &parse_cov_mode(mode, &self.candidates.random, &names)?,
                crate::selection::DEFAULT_STRUCTURE_CAP,
            )?
            .into_iter()
            .map(|p| (None, p))
            .collect(),
        };
        let candidates = patterns
            .into_iter()
            .map(|(name, p)| {
                let mut c = Candidate::from_pattern(&names, p);
                if let Some(n) = name {
                    c.name = n;
                }
                c
            })
            .collect();
        Ok(McConfig {
            replicates: self.replicates,
            seed: self.seed,
            criterion: self.criterion.parse()?,
            design: self.design.clone(),
            truth_spec: spec,
            truth,
            candidates,
            fit: FitOptions {
                nodes: self.nodes,
                compute_se: false,
                ..FitOptions::default()
            },
        })
    }
}
