//! Simulation of datasets and Monte Carlo selection-frequency studies.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{criterion, CriterionKind};
use crate::data::{Dataset, Observation, Subject};
use crate::error::{Error, Result};
use crate::estimation::{fit_ml, project_theta, FitOptions};
use crate::model::{pattern_summary, CovariateMap, ModelSpec, Transform};
use crate::pattern::CovariancePattern;
use crate::seed::derive_seed;
use crate::structural::{ErrorKind, OneCptOral};
use crate::theta::ThetaVector;

/// Normally distributed subject-level covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDistribution {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n_subjects: usize,
    pub times: Vec<f64>,
    /// Amount given to every subject (`dose` regressor).
    #[serde(default = "default_dose")]
    pub dose: f64,
    /// Infusion duration (`tinf` regressor); doses start at time 0.
    #[serde(default = "default_infusion")]
    pub infusion: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub covariates: Vec<CovariateDistribution>,
}

fn default_dose() -> f64 {
    100.0
}

fn default_infusion() -> f64 {
    0.5
}

impl SimDesign {
    pub fn new(n_subjects: usize, times: Vec<f64>, seed: u64) -> Self {
        Self {
            n_subjects,
            times,
            dose: default_dose(),
            infusion: default_infusion(),
            seed,
            covariates: Vec::new(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::input("design needs at least one subject"));
        }
        if self.times.is_empty() {
            return Err(Error::input("design needs at least one sampling time"));
        }
        if self.times.iter().any(|t| !t.is_finite()) || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::input("sampling times must be finite and strictly increasing"));
        }
        for c in &self.covariates {
            if !(c.sd >= 0.0) || !c.mean.is_finite() {
                return Err(Error::input(format!("covariate `{}` has an invalid distribution", c.name)));
            }
        }
        Ok(())
    }
}

/// 20 subjects sampled at 1, 2, 4, 7, 10, 15, 20, 30 and 40, dose 100.
pub fn oral_design(seed: u64) -> SimDesign {
    SimDesign::new(20, vec![1.0, 2.0, 4.0, 7.0, 10.0, 15.0, 20.0, 30.0, 40.0], seed)
}

/// Natural-scale (ka, k, V) used by the oral presets.
pub const ORAL_TYPICAL: [f64; 3] = [1.0, 0.1, 20.0];
/// Random-effect standard deviations (ka, k, V) used by the oral presets.
pub const ORAL_OMEGA_SD: [f64; 3] = [0.2, 0.1, 0.3];
pub const ORAL_SIGMA: f64 = 0.3;

/// One-compartment oral model, log-normal parameters, no covariates, additive error.
pub fn oral_spec(pattern: CovariancePattern) -> Result<ModelSpec> {
    ModelSpec::new(
        Arc::new(OneCptOral),
        vec![Transform::Log; 3],
        CovariateMap::empty(3),
        pattern,
        ErrorKind::Additive,
    )
}

/// θ for [`oral_spec`] with the preset typical values and standard
/// deviations; `correlations` lists `(k, l, ρ)` for correlated pairs.
pub fn oral_theta(spec: &ModelSpec, correlations: &[(usize, usize, f64)]) -> Result<ThetaVector> {
    let idx = spec.pattern().random_indices();
    let n = idx.len();
    let mut omega = DMatrix::zeros(n, n);
    for (r, &k) in idx.iter().enumerate() {
        omega[(r, r)] = ORAL_OMEGA_SD[k].powi(2);
    }
    for &(k, l, rho) in correlations {
        let r = idx.iter().position(|&x| x == k);
        let c = idx.iter().position(|&x| x == l);
        match (r, c) {
            (Some(r), Some(c)) if spec.pattern().is_correlated(k, l) => {
                let v = rho * ORAL_OMEGA_SD[k] * ORAL_OMEGA_SD[l];
                omega[(r, c)] = v;
                omega[(c, r)] = v;
            }
            _ => return Err(Error::input(format!("pair ({k}, {l}) is not correlated in the pattern"))),
        }
    }
    ThetaVector::from_omega(
        spec,
        ORAL_TYPICAL.iter().map(|v| v.ln()).collect(),
        &omega,
        vec![ORAL_SIGMA],
    )
}

fn regressor_value(name: &str, design: &SimDesign) -> Result<f64> {
    match name {
        "dose" => Ok(design.dose),
        "tD" => Ok(0.0),
        "tinf" => Ok(design.infusion),
        other => Err(Error::MissingRegressor(other.to_string())),
    }
}

/// Covariates and natural-scale individual parameters of one simulated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSubject {
    pub covariates: Vec<f64>,
    pub psi: Vec<f64>,
}

struct Sampler<'a> {
    spec: &'a ModelSpec,
    theta: &'a ThetaVector,
    design: &'a SimDesign,
    chol: DMatrix<f64>,
    random: Vec<usize>,
    covariate_names: Vec<String>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a ModelSpec, theta: &'a ThetaVector, design: &'a SimDesign) -> Result<Self> {
        design.check()?;
        theta.check(spec)?;
        let covariate_names: Vec<String> = design.covariates.iter().map(|c| c.name.clone()).collect();
        for list in spec.covmap().per_param() {
            for c in list {
                if !covariate_names.contains(c) {
                    return Err(Error::MissingCovariate(c.clone()));
                }
            }
        }
        Ok(Self {
            spec,
            theta,
            design,
            chol: theta.cholesky(spec),
            random: spec.pattern().random_indices(),
            covariate_names,
        })
    }

    fn rng(&self, i: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.design.seed, i as u64))
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SimulatedSubject {
        let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
        let covariates: Vec<f64> = self.design.covariates.iter().map(|c| c.mean + c.sd * normal()).collect();
        let z = DVector::from_iterator(self.random.len(), (0..self.random.len()).map(|_| normal()));
        let eta = &self.chol * z;
        let spec = self.spec;
        let psi = (0..spec.d())
            .map(|k| {
                let b = self.theta.beta_of(spec, k);
                let mut phi = b[0];
                for (j, c) in spec.covmap().covariates(k).iter().enumerate() {
                    let ci = self.covariate_names.iter().position(|x| x == c).expect("checked in new");
                    phi += b[1 + j] * covariates[ci];
                }
                if let Some(r) = self.random.iter().position(|&x| x == k) {
                    phi += eta[r];
                }
                spec.transforms()[k].inverse(phi)
            })
            .collect();
        SimulatedSubject { covariates, psi }
    }
}

/// Individual parameters exactly as [`simulate_dataset`] draws them.
pub fn simulate_parameters(spec: &ModelSpec, theta: &ThetaVector, design: &SimDesign) -> Result<Vec<SimulatedSubject>> {
    let sampler = Sampler::new(spec, theta, design)?;
    Ok((0..design.n_subjects).map(|i| sampler.draw(&mut sampler.rng(i))).collect())
}

/// Draw a dataset from `spec` at `theta`. Subject `i` uses its own random
/// stream derived from `(design.seed, i)`.
pub fn simulate_dataset(spec: &ModelSpec, theta: &ThetaVector, design: &SimDesign) -> Result<Dataset> {
    let sampler = Sampler::new(spec, theta, design)?;
    let model = spec.structural();
    let regressor_names = model.regressor_names();
    let regressors: Vec<f64> = regressor_names
        .iter()
        .map(|r| regressor_value(r, design))
        .collect::<Result<_>>()?;
    let error = theta.error_model(spec);
    let width = design.n_subjects.to_string().len();
    let mut subjects = Vec::with_capacity(design.n_subjects);
    for i in 0..design.n_subjects {
        let mut rng = sampler.rng(i);
        let SimulatedSubject { covariates, psi } = sampler.draw(&mut rng);
        let mut observations = Vec::with_capacity(design.times.len());
        for &t in &design.times {
            let c = model.predict(t, &regressors, &psi)?;
            let sd = match error.kind {
                ErrorKind::Additive => error.a,
                ErrorKind::Proportional => error.b * c.abs(),
                ErrorKind::Combined => error.a + error.b * c,
            };
            let eps: f64 = StandardNormal.sample(&mut rng);
            observations.push(Observation {
                time: t,
                regressors: regressors.clone(),
                y: c + sd * eps,
            });
        }
        subjects.push(Subject {
            id: format!("{:0width$}", i + 1),
            observations,
            covariates,
        });
    }
    Dataset::new(regressor_names, sampler.covariate_names, subjects)
}

/// One model in a Monte Carlo study's candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub pattern: CovariancePattern,
    /// Covariate map; `None` keeps the true model's map.
    #[serde(default)]
    pub covariates: Option<CovariateMap>,
}

impl Candidate {
    pub fn from_pattern(names: &[String], pattern: CovariancePattern) -> Self {
        Self {
            name: pattern_summary(names, &pattern),
            pattern,
            covariates: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub replicates: usize,
    pub seed: u64,
    pub criterion: CriterionKind,
    pub design: SimDesign,
    pub truth_spec: ModelSpec,
    pub truth: ThetaVector,
    pub candidates: Vec<Candidate>,
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McFrequency {
    pub candidate: String,
    pub selected_count: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McDetail {
    pub replicate: usize,
    pub candidate: String,
    /// `None` when the fit failed.
    pub criterion_value: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub replicates: usize,
    pub frequencies: Vec<McFrequency>,
    /// Replicates in which every candidate fit failed.
    pub failed: usize,
    pub detail: Vec<McDetail>,
}

impl McResult {
    pub fn frequency(&self, candidate: &str) -> f64 {
        self.frequencies
            .iter()
            .find(|f| f.candidate == candidate)
            .map_or(0.0, |f| f.frequency)
    }

    /// `candidate,selected_count,frequency`, one row per candidate plus a
    /// final `<failed>` row.
    pub fn write_frequency_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["candidate", "selected_count", "frequency"])?;
        for f in &self.frequencies {
            out.write_record([f.candidate.clone(), f.selected_count.to_string(), f.frequency.to_string()])?;
        }
        out.write_record([
            "<failed>".to_string(),
            self.failed.to_string(),
            (self.failed as f64 / self.replicates as f64).to_string(),
        ])?;
        out.flush()?;
        Ok(())
    }

    pub fn write_detail_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["replicate", "candidate", "criterion_value", "selected"])?;
        for d in &self.detail {
            out.write_record([
                d.replicate.to_string(),
                d.candidate.clone(),
                d.criterion_value.map_or("NA".to_string(), |v| format!("{v:?}")),
                d.selected.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Candidate specs derived from the true model.
fn candidate_specs(config: &McConfig) -> Result<Vec<ModelSpec>> {
    config
        .candidates
        .iter()
        .map(|c| {
            let spec = config.truth_spec.with_pattern(c.pattern.clone())?;
            match &c.covariates {
                Some(m) => spec.with_covmap(m.clone()),
                None => Ok(spec),
            }
        })
        .collect()
}

/// Index of the best candidate: smallest criterion, ties (within 1e-9)
/// broken by fewer parameters, then by name.
fn argmin(values: &[Option<f64>], specs: &[ModelSpec], names: &[String]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        let Some(v) = v else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let bv = values[b].expect("best has a value");
                let better = if (v - bv).abs() <= 1e-9 {
                    (specs[i].n_params(), &names[i]) < (specs[b].n_params(), &names[b])
                } else {
                    *v < bv
                };
                Some(if better { i } else { b })
            }
        };
    }
    best
}

/// Simulate `replicates` datasets, fit every candidate to each one (starting
/// from the truth projected onto the candidate) and count how often each
/// candidate minimizes the criterion.
pub fn mc_selection_study(config: &McConfig) -> Result<McResult> {
    if config.replicates == 0 {
        return Err(Error::input("replicates must be at least 1"));
    }
    if config.candidates.is_empty() {
        return Err(Error::input("the candidate list is empty"));
    }
    config.design.check()?;
    let specs = candidate_specs(config)?;
    let names: Vec<String> = config.candidates.iter().map(|c| c.name.clone()).collect();
    let inits: Vec<ThetaVector> = specs
        .iter()
        .map(|s| project_theta(&config.truth_spec, &config.truth, s))
        .collect::<Result<_>>()?;
    let run = |rep: usize| -> Result<(Vec<Option<f64>>, Option<usize>)> {
        let design = SimDesign {
            seed: derive_seed(config.seed, rep as u64),
            ..config.design.clone()
        };
        let data = simulate_dataset(&config.truth_spec, &config.truth, &design)?;
        let values: Vec<Option<f64>> = specs
            .iter()
            .zip(&inits)
            .enumerate()
            .map(|(c, (spec, init))| {
                let opts = FitOptions {
                    init: Some(init.clone()),
                    seed: derive_seed(design.seed, c as u64),
                    compute_se: false,
                    ..config.fit.clone()
                };
                fit_ml(&data, spec, &opts)
                    .ok()
                    .and_then(|f| criterion(&f, config.criterion).ok())
                    .map(|v| v.value)
            })
            .collect();
        let best = argmin(&values, &specs, &names);
        Ok((values, best))
    };
    let outcomes: Vec<Result<(Vec<Option<f64>>, Option<usize>)>> =
        (0..config.replicates).into_par_iter().map(run).collect();
    let mut counts = vec![0usize; specs.len()];
    let mut failed = 0;
    let mut detail = Vec::with_capacity(config.replicates * specs.len());
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        let (values, best) = outcome?;
        match best {
            Some(b) => counts[b] += 1,
            None => failed += 1,
        }
        for (c, v) in values.into_iter().enumerate() {
            detail.push(McDetail {
                replicate: rep,
                candidate: names[c].clone(),
                criterion_value: v,
                selected: best == Some(c),
            });
        }
    }
    let frequencies = names
        .iter()
        .zip(&counts)
        .map(|(n, &k)| McFrequency {
            candidate: n.clone(),
            selected_count: k,
            frequency: k as f64 / config.replicates as f64,
        })
        .collect();
    Ok(McResult {
        replicates: config.replicates,
        frequencies,
        failed,
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_gives_identical_noiseless_curves() {
        let spec = oral_spec(CovariancePattern::none(3)).unwrap();
        let theta = ThetaVector::new(ORAL_TYPICAL.iter().map(|v| v.ln()).collect(), vec![], vec![0.0]);
        let ds = simulate_dataset(&spec, &theta, &oral_design(3)).unwrap();
        let first: Vec<f64> = ds.subjects()[0].observations.iter().map(|o| o.y).collect();
        for s in ds.subjects() {
            let ys: Vec<f64> = s.observations.iter().map(|o| o.y).collect();
            assert_eq!(ys, first);
        }
        let c = crate::structural::onecpt_oral(100.0, 1.0, 1.0, 0.1, 20.0);
        assert!((first[0] - c).abs() < 1e-12);
    }

    #[test]
    fn seeds_are_reproducible() {
        let spec = oral_spec(CovariancePattern::all_random(3)).unwrap();
        let theta = oral_theta(&spec, &[]).unwrap();
        let a = simulate_dataset(&spec, &theta, &oral_design(11)).unwrap();
        let b = simulate_dataset(&spec, &theta, &oral_design(11)).unwrap();
        let c = simulate_dataset(&spec, &theta, &oral_design(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.n_total(), 180);
        assert_eq!(a.subjects()[0].id, "01");
    }

    #[test]
    fn log_v_spread_matches_omega() {
        let spec = oral_spec(CovariancePattern::all_random(3)).unwrap();
        let theta = oral_theta(&spec, &[]).unwrap();
        let draws = simulate_parameters(&spec, &theta, &SimDesign::new(10_000, vec![1.0], 5)).unwrap();
        let logv: Vec<f64> = draws.iter().map(|d| d.psi[2].ln()).collect();
        let n = logv.len() as f64;
        let mean = logv.iter().sum::<f64>() / n;
        let sd = (logv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.3).abs() < 0.3 * 0.02, "{sd}");
    }

    #[test]
    fn unknown_covariate_is_rejected() {
        let spec = oral_spec(CovariancePattern::none(3))
            .unwrap()
            .with_covmap(CovariateMap::new(vec![vec!["wt".into()], vec![], vec![]]).unwrap())
            .unwrap();
        let theta = ThetaVector::new(vec![0.0, 0.0, -2.3, 3.0], vec![], vec![0.3]);
        assert!(matches!(
            simulate_dataset(&spec, &theta, &oral_design(1)),
            Err(Error::MissingCovariate(c)) if c == "wt"
        ));
    }
}
