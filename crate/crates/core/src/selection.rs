//! Model-space enumeration and stepwise selection of the covariance structure
//! and the covariate model.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{criterion, CriterionKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimation::{fit_ml, project_theta, FitOptions, FitResult};
use crate::model::{CovariateMap, ModelSpec};
use crate::pattern::{count_vec_omega, CovariancePattern};

/// Largest parameter count accepted by [`enumerate_cov_structures`] by default.
pub const DEFAULT_STRUCTURE_CAP: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// Every subset of random parameters, no correlations.
    DiagonalOnly,
    /// Every subset of random parameters with every correlation mask over it.
    Full,
    /// The given random parameters with every correlation mask over them.
    FixedDiagonal(Vec<usize>),
}

fn subsets(items: &[usize]) -> Vec<Vec<usize>> {
    (0u64..1 << items.len())
        .map(|m| {
            items
                .iter()
                .enumerate()
                .filter(|(i, _)| m >> i & 1 == 1)
                .map(|(_, &x)| x)
                .collect()
        })
        .collect()
}

fn pairs_of(set: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &k) in set.iter().enumerate() {
        for &l in &set[i + 1..] {
            out.push((k, l));
        }
    }
    out
}

fn structure_count(d: usize, mode: &CovMode) -> usize {
    let pow2 = |e: usize| 1usize.checked_shl(e as u32).unwrap_or(usize::MAX);
    match mode {
        CovMode::DiagonalOnly => pow2(d),
        CovMode::FixedDiagonal(s) => pow2(s.len() * s.len().saturating_sub(1) / 2),
        CovMode::Full => {
            let mut total = 0usize;
            let mut binom = 1usize;
            for s in 0..=d {
                total = total.saturating_add(binom.saturating_mul(pow2(s * s.saturating_sub(1) / 2)));
                binom = binom.saturating_mul(d - s) / (s + 1);
            }
            total
        }
    }
}

/// All covariance patterns of `mode` for `d` parameters, ordered by number
/// of free entries, then by the list of random parameters, then by the list
/// of correlated pairs. Fails when `d` exceeds `cap`.
pub fn enumerate_cov_structures_with_cap(d: usize, mode: &CovMode, cap: usize) -> Result<Vec<CovariancePattern>> {
    if d > cap {
        return Err(Error::TooManyStructures {
            d,
            count: structure_count(d, mode),
            cap,
        });
    }
    let all: Vec<usize> = (0..d).collect();
    let diag_sets: Vec<Vec<usize>> = match mode {
        CovMode::DiagonalOnly | CovMode::Full => subsets(&all),
        CovMode::FixedDiagonal(s) => {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            if s.iter().any(|&k| k >= d) {
                return Err(Error::InvalidPattern(format!("parameter index out of range for d = {d}")));
            }
            vec![s]
        }
    };
    let mut keyed = Vec::new();
    for set in diag_sets {
        let mut diag = vec![false; d];
        for &k in &set {
            diag[k] = true;
        }
        let masks = match mode {
            CovMode::DiagonalOnly => vec![vec![]],
            _ => subsets(&(0..pairs_of(&set).len()).collect::<Vec<_>>()),
        };
        let pairs = pairs_of(&set);
        for mask in masks {
            let mut p = CovariancePattern::diagonal(diag.clone());
            let chosen: Vec<(usize, usize)> = mask.iter().map(|&i| pairs[i]).collect();
            for &(k, l) in &chosen {
                p.set_correlation(k, l, true);
            }
            keyed.push(((count_vec_omega(&p), set.clone(), chosen), p));
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed.into_iter().map(|(_, p)| p).collect())
}

pub fn enumerate_cov_structures(d: usize, mode: &CovMode) -> Result<Vec<CovariancePattern>> {
    enumerate_cov_structures_with_cap(d, mode, DEFAULT_STRUCTURE_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveDirection {
    Add,
    Remove,
}

/// Covariate maps one inclusion (or exclusion) away from `current`, ordered
/// by parameter index then covariate name. `params` restricts which
/// parameters may receive covariates when adding.
pub fn covariate_moves(
    current: &CovariateMap,
    pool: &[String],
    direction: MoveDirection,
    params: Option<&[usize]>,
) -> Vec<CovariateMap> {
    let mut sorted_pool: Vec<&String> = pool.iter().collect();
    sorted_pool.sort();
    sorted_pool.dedup();
    let mut out = Vec::new();
    for k in 0..current.len() {
        match direction {
            MoveDirection::Add => {
                if params.is_some_and(|p| !p.contains(&k)) {
                    continue;
                }
                for c in &sorted_pool {
                    if !current.contains(k, c) {
                        out.push(current.with_added(k, c));
                    }
                }
            }
            MoveDirection::Remove => {
                let mut present: Vec<&String> = current.covariates(k).iter().collect();
                present.sort();
                for c in present {
                    out.push(current.with_removed(k, c));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStart {
    /// No covariates; candidate moves add one covariate.
    Forward,
    /// Every pool covariate on every eligible parameter; moves remove one.
    Backward,
    /// The given map; moves both add and remove.
    User(CovariateMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepwiseOptions {
    pub start: SearchStart,
    pub cov_mode: CovMode,
    /// Parameters that may carry covariates; `None` allows all.
    pub covariate_params: Option<Vec<usize>>,
    /// Required improvement for a move to be accepted.
    pub tol: f64,
    pub max_steps: usize,
    pub structure_cap: usize,
    pub fit: FitOptions,
    /// After the search, try correlation masks over the selected random set.
    pub refine_correlations: bool,
}

impl Default for StepwiseOptions {
    fn default() -> Self {
        Self {
            start: SearchStart::Forward,
            cov_mode: CovMode::DiagonalOnly,
            covariate_params: None,
            tol: 1e-6,
            max_steps: 50,
            structure_cap: DEFAULT_STRUCTURE_CAP,
            fit: FitOptions {
                compute_se: false,
                ..FitOptions::default()
            },
            refine_correlations: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Covariance,
    Covariate,
    Correlation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Covariance => "covariance",
            Phase::Covariate => "covariate",
            Phase::Correlation => "correlation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCandidate {
    pub summary: String,
    pub pattern: CovariancePattern,
    pub covariates: CovariateMap,
    pub n_params: usize,
    /// `None` when the fit failed.
    pub value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub phase: Phase,
    pub candidates: Vec<TraceCandidate>,
    /// Index into `candidates` of the accepted move.
    pub accepted: Option<usize>,
    /// Incumbent criterion value when the step started.
    pub incumbent_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub criterion: CriterionKind,
    pub steps: Vec<TraceStep>,
    pub final_summary: String,
    pub final_value: f64,
    pub final_fit: FitResult,
}

impl SelectionTrace {
    /// `step,phase,candidate,criterion,value,accepted`; failed fits show `NA`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "phase", "candidate", "criterion", "value", "accepted"])?;
        for s in &self.steps {
            for (i, c) in s.candidates.iter().enumerate() {
                out.write_record([
                    s.step.to_string(),
                    s.phase.to_string(),
                    c.summary.clone(),
                    self.criterion.to_string(),
                    c.value.map_or("NA".to_string(), |v| format!("{v:?}")),
                    (s.accepted == Some(i)).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_pattern(&self) -> &CovariancePattern {
        &self.final_fit.pattern
    }

    pub fn final_covariates(&self) -> &CovariateMap {
        &self.final_fit.covariates
    }
}

type FitOutcome = std::result::Result<(FitResult, f64), String>;

struct Search<'a> {
    dataset: &'a Dataset,
    base: &'a ModelSpec,
    kind: CriterionKind,
    opts: &'a StepwiseOptions,
    cache: HashMap<String, FitOutcome>,
}

struct Incumbent {
    spec: ModelSpec,
    fit: Option<FitResult>,
    value: f64,
}

impl<'a> Search<'a> {
    fn spec_for(&self, pattern: &CovariancePattern, covmap: &CovariateMap) -> Result<ModelSpec> {
        self.base.with_pattern(pattern.clone())?.with_covmap(covmap.canonical())
    }

    fn fit_one(&self, spec: &ModelSpec, incumbent: Option<&Incumbent>) -> FitOutcome {
        let init = incumbent
            .and_then(|inc| inc.fit.as_ref().map(|f| (inc, f)))
            .and_then(|(inc, f)| project_theta(&inc.spec, &f.theta, spec).ok());
        let attempt = |init: Option<crate::theta::ThetaVector>| -> FitOutcome {
            let opts = FitOptions {
                init,
                ..self.opts.fit.clone()
            };
            let fit = fit_ml(self.dataset, spec, &opts).map_err(|e| e.to_string())?;
            let value = criterion(&fit, self.kind).map_err(|e| e.to_string())?.value;
            Ok((fit, value))
        };
        match attempt(init.clone()) {
            Ok(v) => Ok(v),
            Err(e) if init.is_some() => attempt(None).map_err(|e2| format!("{e}; from default start: {e2}")),
            Err(e) => Err(e),
        }
    }

    /// Fit every spec (in parallel, consulting the cache) and return outcomes in order.
    fn fit_all(&mut self, specs: &[ModelSpec], incumbent: Option<&Incumbent>) -> Vec<FitOutcome> {
        let todo: Vec<usize> = {
            let mut seen = std::collections::HashSet::new();
            (0..specs.len())
                .filter(|&i| {
                    let key = specs[i].summary();
                    !self.cache.contains_key(&key) && seen.insert(key)
                })
                .collect()
        };
        let fresh: Vec<(String, FitOutcome)> = todo
            .par_iter()
            .map(|&i| (specs[i].summary(), self.fit_one(&specs[i], incumbent)))
            .collect();
        self.cache.extend(fresh);
        specs.iter().map(|s| self.cache[&s.summary()].clone()).collect()
    }

    /// Run one phase over `specs`; returns the recorded step and the new
    /// incumbent if a candidate improved on it.
    fn phase(
        &mut self,
        step: usize,
        phase: Phase,
        specs: Vec<ModelSpec>,
        incumbent: &Incumbent,
    ) -> (TraceStep, Option<Incumbent>) {
        let outcomes = self.fit_all(&specs, Some(incumbent));
        let candidates: Vec<TraceCandidate> = specs
            .iter()
            .zip(&outcomes)
            .map(|(s, o)| TraceCandidate {
                summary: s.summary(),
                pattern: (**s.pattern()).clone(),
                covariates: s.covmap().canonical(),
                n_params: s.n_params(),
                value: o.as_ref().ok().map(|(_, v)| *v),
                error: o.as_ref().err().cloned(),
            })
            .collect();
        let best = best_candidate(&candidates, self.opts.tol);
        let accepted = best.filter(|&b| {
            let v = candidates[b].value.expect("best has a value");
            v < incumbent.value - self.opts.tol
        });
        let next = accepted.map(|b| {
            let (fit, value) = outcomes[b].clone().expect("accepted fit succeeded");
            Incumbent {
                spec: specs[b].clone(),
                fit: Some(fit),
                value,
            }
        });
        (
            TraceStep {
                step,
                phase,
                candidates,
                accepted,
                incumbent_value: incumbent.value,
            },
            next,
        )
    }
}

/// Smallest value; values within `tol` of it are broken by fewer
/// parameters, then by summary.
fn best_candidate(c: &[TraceCandidate], tol: f64) -> Option<usize> {
    let min = c.iter().filter_map(|x| x.value).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    (0..c.len())
        .filter(|&i| c[i].value.is_some_and(|v| v <= min + tol))
        .min_by(|&a, &b| (c[a].n_params, &c[a].summary).cmp(&(c[b].n_params, &c[b].summary)))
}

/// Stepwise search alternating a covariance phase (every structure with the
/// covariate map fixed) and a covariate phase (every one-covariate move with
/// the structure fixed). A move is accepted only if it lowers the criterion
/// by more than `tol`; the search stops after a covariate phase without
/// improvement, when no covariate moves remain, or after `max_steps` steps.
///
/// `base` supplies the structural model, transforms, error model and the
/// starting covariance pattern.
pub fn stepwise_select(
    dataset: &Dataset,
    base: &ModelSpec,
    pool: &[String],
    kind: CriterionKind,
    opts: &StepwiseOptions,
) -> Result<SelectionTrace> {
    for c in pool {
        if dataset.covariate_index(c).is_none() {
            return Err(Error::MissingCovariate(c.clone()));
        }
    }
    let d = base.d();
    let patterns = enumerate_cov_structures_with_cap(d, &opts.cov_mode, opts.structure_cap)?;
    let params = opts.covariate_params.as_deref();
    let (start_map, directions): (CovariateMap, Vec<MoveDirection>) = match &opts.start {
        SearchStart::Forward => (CovariateMap::empty(d), vec![MoveDirection::Add]),
        SearchStart::Backward => (CovariateMap::full(d, pool, params), vec![MoveDirection::Remove]),
        SearchStart::User(m) => (m.canonical(), vec![MoveDirection::Add, MoveDirection::Remove]),
    };
    let mut search = Search {
        dataset,
        base,
        kind,
        opts,
        cache: HashMap::new(),
    };
    let start_spec = search.spec_for(base.pattern(), &start_map)?;
    let start_outcome = search.fit_all(std::slice::from_ref(&start_spec), None).remove(0);
    let mut incumbent = match start_outcome {
        Ok((fit, value)) => Incumbent {
            spec: start_spec,
            fit: Some(fit),
            value,
        },
        Err(_) => Incumbent {
            spec: start_spec,
            fit: None,
            value: f64::INFINITY,
        },
    };
    let mut steps = Vec::new();
    let mut step = 0;
    while step < opts.max_steps {
        step += 1;
        let specs: Vec<ModelSpec> = patterns
            .iter()
            .map(|p| search.spec_for(p, incumbent.spec.covmap()))
            .collect::<Result<_>>()?;
        let (record, next) = search.phase(step, Phase::Covariance, specs, &incumbent);
        steps.push(record);
        if let Some(n) = next {
            incumbent = n;
        }
        if step >= opts.max_steps {
            break;
        }
        let mut specs = Vec::new();
        for &dir in &directions {
            for m in covariate_moves(incumbent.spec.covmap(), pool, dir, params) {
                specs.push(search.spec_for(incumbent.spec.pattern(), &m)?);
            }
        }
        if specs.is_empty() {
            break;
        }
        step += 1;
        let (record, next) = search.phase(step, Phase::Covariate, specs, &incumbent);
        steps.push(record);
        match next {
            Some(n) => incumbent = n,
            None => break,
        }
    }
    if opts.refine_correlations && incumbent.spec.pattern().is_diagonal() && incumbent.fit.is_some() {
        let active = incumbent.spec.pattern().random_indices();
        if active.len() >= 2 {
            step += 1;
            let masks = enumerate_cov_structures_with_cap(d, &CovMode::FixedDiagonal(active), usize::MAX)?;
            let specs: Vec<ModelSpec> = masks
                .iter()
                .map(|p| search.spec_for(p, incumbent.spec.covmap()))
                .collect::<Result<_>>()?;
            let (record, next) = search.phase(step, Phase::Correlation, specs, &incumbent);
            steps.push(record);
            if let Some(n) = next {
                incumbent = n;
            }
        }
    }
    finish(dataset, kind, opts, steps, incumbent)
}

fn finish(
    dataset: &Dataset,
    kind: CriterionKind,
    opts: &StepwiseOptions,
    steps: Vec<TraceStep>,
    incumbent: Incumbent,
) -> Result<SelectionTrace> {
    let fit = incumbent
        .fit
        .ok_or_else(|| Error::input("no candidate model could be fitted"))?;
    // standard errors for the selected model, restarting at its estimate
    let final_fit = if opts.fit.compute_se {
        fit
    } else {
        let o = FitOptions {
            init: Some(fit.theta.clone()),
            compute_se: true,
            ..opts.fit.clone()
        };
        fit_ml(dataset, &incumbent.spec, &o).unwrap_or(fit)
    };
    Ok(SelectionTrace {
        criterion: kind,
        steps,
        final_summary: incumbent.spec.summary(),
        final_value: criterion(&final_fit, kind)?.value,
        final_fit,
    })
}

/// Correlation masks over the random set of a diagonal model; the incumbent
/// is kept unless some mask lowers the criterion by more than `opts.tol`.
pub fn refine_correlations(
    dataset: &Dataset,
    spec: &ModelSpec,
    fit: &FitResult,
    kind: CriterionKind,
    opts: &StepwiseOptions,
) -> Result<SelectionTrace> {
    if !spec.pattern().is_diagonal() {
        return Err(Error::input("correlation refinement starts from a diagonal structure"));
    }
    let incumbent = Incumbent {
        spec: spec.clone(),
        fit: Some(fit.clone()),
        value: criterion(fit, kind)?.value,
    };
    let active = spec.pattern().random_indices();
    if active.len() < 2 {
        return finish(dataset, kind, opts, Vec::new(), incumbent);
    }
    let mut search = Search {
        dataset,
        base: spec,
        kind,
        opts,
        cache: HashMap::new(),
    };
    search
        .cache
        .insert(spec.summary(), Ok((fit.clone(), incumbent.value)));
    let masks = enumerate_cov_structures_with_cap(spec.d(), &CovMode::FixedDiagonal(active), usize::MAX)?;
    let specs: Vec<ModelSpec> = masks
        .iter()
        .map(|p| search.spec_for(p, spec.covmap()))
        .collect::<Result<_>>()?;
    let (record, next) = search.phase(1, Phase::Correlation, specs, &incumbent);
    finish(dataset, kind, opts, vec![record], next.unwrap_or(incumbent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(ps: &[CovariancePattern]) -> Vec<String> {
        let n: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        ps.iter()
            .map(|p| crate::model::pattern_summary(&n[..p.d()], p))
            .collect()
    }

    #[test]
    fn diagonal_enumeration() {
        let ps = enumerate_cov_structures(3, &CovMode::DiagonalOnly).unwrap();
        assert_eq!(
            names(&ps),
            ["re{}", "re{a}", "re{b}", "re{c}", "re{a,b}", "re{a,c}", "re{b,c}", "re{a,b,c}"]
        );
    }

    #[test]
    fn full_enumeration_counts() {
        assert_eq!(enumerate_cov_structures(2, &CovMode::Full).unwrap().len(), 5);
        assert_eq!(enumerate_cov_structures(3, &CovMode::Full).unwrap().len(), 1 + 3 + 3 * 2 + 8);
        let four = enumerate_cov_structures(4, &CovMode::Full).unwrap();
        assert_eq!(four.len(), 1 + 4 + 6 * 2 + 4 * 8 + 64);
        let unique: std::collections::HashSet<_> = four.iter().collect();
        assert_eq!(unique.len(), four.len());
        assert!(matches!(
            enumerate_cov_structures(5, &CovMode::Full),
            Err(Error::TooManyStructures { d: 5, count: 1450, cap: 4 })
        ));
    }

    #[test]
    fn fixed_diagonal_enumeration() {
        let ps = enumerate_cov_structures(3, &CovMode::FixedDiagonal(vec![0, 1, 2])).unwrap();
        assert_eq!(ps.len(), 8);
        assert!(ps.iter().all(|p| p.n_random() == 3));
        assert!(ps[0].is_diagonal());
        assert_eq!(ps[7].correlated_pairs().len(), 3);
        assert_eq!(enumerate_cov_structures(3, &CovMode::FixedDiagonal(vec![2])).unwrap().len(), 1);
    }

    #[test]
    fn moves() {
        let pool: Vec<String> = ["wt", "age", "ClCr"].iter().map(|s| s.to_string()).collect();
        let empty = CovariateMap::empty(2);
        let add = covariate_moves(&empty, &pool, MoveDirection::Add, None);
        assert_eq!(add.len(), 6);
        assert_eq!(add[0].covariates(0), ["ClCr"]);
        assert_eq!(add[3].covariates(1), ["ClCr"]);
        let full = CovariateMap::full(2, &pool, None);
        assert!(covariate_moves(&full, &pool, MoveDirection::Add, None).is_empty());
        let m = CovariateMap::new(vec![vec!["wt".into()], vec!["wt".into(), "age".into(), "ClCr".into()]]).unwrap();
        assert_eq!(covariate_moves(&m, &pool, MoveDirection::Remove, None).len(), 4);
        let only_second = covariate_moves(&empty, &pool, MoveDirection::Add, Some(&[1]));
        assert_eq!(only_second.len(), 3);
    }
}
