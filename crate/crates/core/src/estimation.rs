//! Maximum-likelihood fitting and standard errors.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{CovariateScaling, Problem};
use crate::model::{theta_dims, CovariateMap, ModelSpec, ThetaDims, Transform};
use crate::optim::{minimize, BfgsOptions, Objective};
use crate::pattern::CovariancePattern;
use crate::seed::derive_seed;
use crate::structural::ErrorKind;
use crate::theta::{pack, unpack, ThetaVector};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Quadrature nodes per random dimension; 1 selects the Laplace approximation.
    pub nodes: usize,
    pub max_iter: usize,
    /// Extra attempts from jittered starts when the first one fails.
    pub retries: usize,
    pub seed: u64,
    pub max_inner: usize,
    /// Starting value on the original covariate scale; `None` uses [`default_init`].
    pub init: Option<ThetaVector>,
    /// Center and scale covariate columns while optimizing.
    pub standardize: bool,
    pub compute_se: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            nodes: 1,
            max_iter: 500,
            retries: 3,
            seed: 0,
            max_inner: 100,
            init: None,
            standardize: true,
            compute_se: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Intercept,
    Covariate,
    Variance,
    Covariance,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub kind: EstimateKind,
    pub estimate: f64,
    pub se: Option<f64>,
    /// Relative standard error in percent.
    pub rse: Option<f64>,
    /// Two-sided Wald p-value (covariate coefficients only).
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub structural: String,
    pub summary: String,
    pub parameter_names: Vec<String>,
    pub transforms: Vec<Transform>,
    pub covariates: CovariateMap,
    pub pattern: CovariancePattern,
    pub error_kind: ErrorKind,
    /// Estimate on the original covariate scale.
    pub theta: ThetaVector,
    /// Ω_R over the random parameters, ascending parameter order.
    pub omega: Vec<Vec<f64>>,
    pub loglik: f64,
    pub dims: ThetaDims,
    pub n_subjects: usize,
    pub n_total: usize,
    pub nodes: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Number of jittered restarts that were needed.
    pub restarts: usize,
    /// ∞-norm of the final gradient of −log L in the optimizer's coordinates.
    pub gradient_norm: f64,
    pub estimates: Vec<ParameterEstimate>,
    /// Why standard errors are missing, if they are.
    pub se_note: Option<String>,
    pub scaling: CovariateScaling,
}

impl FitResult {
    pub fn estimate(&self, name: &str) -> Option<&ParameterEstimate> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

/// Names and kinds of the reported quantities, in [`report_values`] order.
pub fn report_layout(spec: &ModelSpec) -> Vec<(String, EstimateKind)> {
    let names = spec.parameter_names();
    let mut out = Vec::new();
    for (k, n) in names.iter().enumerate() {
        out.push((n.clone(), EstimateKind::Intercept));
        for c in spec.covmap().covariates(k) {
            out.push((format!("{n}:{c}"), EstimateKind::Covariate));
        }
    }
    let idx = spec.pattern().random_indices();
    for (r, &k) in idx.iter().enumerate() {
        out.push((format!("omega2_{}", names[k]), EstimateKind::Variance));
        for &l in &idx[..r] {
            if spec.pattern().is_correlated(k, l) {
                out.push((format!("omega_{}_{}", names[l], names[k]), EstimateKind::Covariance));
            }
        }
    }
    for e in spec.error_kind().param_names() {
        out.push((e.to_string(), EstimateKind::Error));
    }
    out
}

/// β, the free entries of Ω_R as variances and covariances, and the error
/// parameters.
pub fn report_values(theta: &ThetaVector, spec: &ModelSpec) -> Vec<f64> {
    let mut out = theta.beta.clone();
    let omega = theta.omega(spec);
    let idx = spec.pattern().random_indices();
    for (r, &k) in idx.iter().enumerate() {
        out.push(omega[(r, r)]);
        for (s, &l) in idx[..r].iter().enumerate() {
            if spec.pattern().is_correlated(k, l) {
                out.push(omega[(r, s)]);
            }
        }
    }
    out.extend_from_slice(&theta.error);
    out
}

fn grid_levels(t: Transform, fine: bool) -> Vec<f64> {
    match t {
        Transform::Log => {
            let step = if fine { 0.5 } else { 1.0 };
            let n = (6.0 / step) as i32;
            (0..=n)
                .map(|i| 10f64.powf(-3.0 + step * i as f64).ln())
                .collect()
        }
        Transform::Identity => vec![-100.0, -10.0, -1.0, 0.0, 1.0, 10.0, 100.0],
        Transform::Logit => [0.1, 0.3, 0.5, 0.7, 0.9]
            .iter()
            .map(|&p| Transform::Logit.forward(p))
            .collect(),
    }
}

/// Starting value: typical values from a pooled least-squares fit (grid
/// search over natural magnitudes, then quasi-Newton refinement), covariate
/// coefficients 0, Ω_R = 0.1·I, additive error at the residual SD and
/// proportional error 0.1.
pub fn default_init(dataset: &Dataset, spec: &ModelSpec) -> Result<ThetaVector> {
    let problem = Problem::new(dataset, spec, None)?;
    let d = spec.d();
    let transforms = spec.transforms();
    let levels: Vec<Vec<f64>> = transforms.iter().map(|&t| grid_levels(t, d <= 3)).collect();
    let sse_phi = |phi: &[f64]| -> Option<f64> {
        let psi: Vec<f64> = phi.iter().zip(transforms).map(|(p, t)| t.inverse(*p)).collect();
        problem.pooled_sse(&psi)
    };
    let mut idx = vec![0usize; d];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let total: usize = levels.iter().map(Vec::len).product();
    for _ in 0..total {
        let phi: Vec<f64> = idx.iter().zip(&levels).map(|(&i, l)| l[i]).collect();
        if let Some(v) = sse_phi(&phi) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, phi));
            }
        }
        for (slot, l) in idx.iter_mut().zip(&levels) {
            *slot += 1;
            if *slot < l.len() {
                break;
            }
            *slot = 0;
        }
    }
    let (_, phi0) = best.ok_or(Error::NonFiniteObjective)?;
    let mut obj = |x: &[f64]| sse_phi(x);
    let opts = BfgsOptions {
        max_iter: 200,
        ..BfgsOptions::default()
    };
    let refined = minimize(&mut obj, &phi0, &opts).ok_or(Error::NonFiniteObjective)?;
    let n = problem.n_total() as f64;
    let mean_abs_y: f64 = dataset
        .subjects()
        .iter()
        .flat_map(|s| s.observations.iter().map(|o| o.y.abs()))
        .sum::<f64>()
        / n;
    let resid_sd = (refined.f / n).sqrt().max(1e-6 * (1.0 + mean_abs_y));
    let mut beta = Vec::with_capacity(spec.n_beta());
    for (k, phi) in refined.x.iter().enumerate() {
        beta.push(*phi);
        beta.extend(std::iter::repeat_n(0.0, spec.covmap().covariates(k).len()));
    }
    let n_rand = spec.pattern().n_random();
    let omega = DMatrix::identity(n_rand, n_rand) * 0.1;
    let error = match spec.error_kind() {
        ErrorKind::Additive => vec![resid_sd],
        ErrorKind::Proportional => vec![0.1],
        ErrorKind::Combined => vec![resid_sd, 0.1],
    };
    ThetaVector::from_omega(spec, beta, &omega, error)
}

/// Carry an estimate over to a neighbouring model: shared coefficients,
/// variances and covariances are kept; new covariate coefficients start at
/// 0, new variances at 0.1 and new covariances at 0. Off-diagonal entries are
/// shrunk until the result is positive definite.
pub fn project_theta(from: &ModelSpec, theta: &ThetaVector, to: &ModelSpec) -> Result<ThetaVector> {
    theta.check(from)?;
    if from.d() != to.d() {
        return Err(Error::Dimension("models differ in parameter count".into()));
    }
    let mut beta = Vec::with_capacity(to.n_beta());
    for k in 0..to.d() {
        let old = theta.beta_of(from, k);
        beta.push(old[0]);
        for c in to.covmap().covariates(k) {
            let v = from
                .covmap()
                .covariates(k)
                .iter()
                .position(|x| x == c)
                .map_or(0.0, |j| old[1 + j]);
            beta.push(v);
        }
    }
    let from_idx = from.pattern().random_indices();
    let from_omega = theta.omega(from);
    let pos = |k: usize| from_idx.iter().position(|&x| x == k);
    let to_idx = to.pattern().random_indices();
    let n = to_idx.len();
    let mut omega = DMatrix::zeros(n, n);
    for (r, &k) in to_idx.iter().enumerate() {
        omega[(r, r)] = pos(k).map_or(0.1, |i| from_omega[(i, i)]).max(1e-8);
        for (c, &l) in to_idx[..r].iter().enumerate() {
            if to.pattern().is_correlated(k, l) {
                let v = match (pos(k), pos(l)) {
                    (Some(i), Some(j)) if from.pattern().is_correlated(k, l) => from_omega[(i, j)],
                    _ => 0.0,
                };
                omega[(r, c)] = v;
                omega[(c, r)] = v;
            }
        }
    }
    for _ in 0..60 {
        if Cholesky::new(omega.clone()).is_some() {
            break;
        }
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    omega[(r, c)] *= 0.5;
                }
            }
        }
    }
    let error = if from.error_kind() == to.error_kind() {
        theta.error.clone()
    } else {
        vec![0.1; to.error_kind().n_params()]
    };
    ThetaVector::from_omega(to, beta, &omega, error)
}

/// −log L over packed coordinates, with empirical-Bayes warm starts carried
/// from the last accepted iterate.
struct NegLogLik<'p, 'a> {
    problem: &'p Problem<'a>,
    spec: &'a ModelSpec,
    nodes: usize,
    accepted: Option<Vec<DVector<f64>>>,
    pending: Option<Vec<DVector<f64>>>,
}

impl NegLogLik<'_, '_> {
    fn eval(&mut self, x: &[f64]) -> Option<f64> {
        let theta = unpack(x, self.spec).ok()?;
        let m = self.problem.marginal(&theta, self.nodes, self.accepted.as_deref()).ok()?;
        self.pending = Some(m.modes);
        m.value.is_finite().then_some(-m.value)
    }
}

impl Objective for NegLogLik<'_, '_> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self.eval(x)
    }

    fn accept(&mut self, _x: &[f64]) {
        if let Some(p) = self.pending.take() {
            self.accepted = Some(p);
        }
    }
}

fn jitter(x0: &[f64], spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 0.3).expect("valid sd");
    let nb = spec.n_beta();
    let log_beta: Vec<bool> = (0..spec.d())
        .flat_map(|k| {
            let n = 1 + spec.covmap().covariates(k).len();
            let is_log = spec.transforms()[k] == Transform::Log;
            (0..n).map(move |j| j == 0 && is_log)
        })
        .collect();
    let free = spec.pattern().free_cholesky_positions();
    x0.iter()
        .enumerate()
        .map(|(i, &v)| {
            let z = normal.sample(rng);
            let log_scale = if i < nb {
                log_beta[i]
            } else if i < nb + free.len() {
                let (r, s) = free[i - nb];
                r == s
            } else {
                true
            };
            if log_scale {
                v + z
            } else {
                v * z.exp()
            }
        })
        .collect()
}

/// Maximum-likelihood fit of `spec` to `dataset`.
///
/// A run that exhausts its iterations returns [`Error::MaxIterations`]
/// carrying the best partial result.
pub fn fit_ml(dataset: &Dataset, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    let scaling = if options.standardize {
        CovariateScaling::from_dataset(dataset, spec)?
    } else {
        CovariateScaling::identity()
    };
    let mut problem = Problem::new(dataset, spec, Some(&scaling))?;
    problem.inner.max_iter = options.max_inner;
    problem.check_grid(options.nodes)?;
    let init = match &options.init {
        Some(t) => {
            t.check(spec)?;
            t.clone()
        }
        None => default_init(dataset, spec)?,
    };
    let x0 = pack(&scaling.to_scaled(&init, spec), spec)?;
    let bfgs = BfgsOptions {
        max_iter: options.max_iter,
        ..BfgsOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(options.seed, 0x0f17));
    let mut best: Option<(crate::optim::BfgsResult, usize, Option<Vec<DVector<f64>>>)> = None;
    for attempt in 0..=options.retries {
        let start = if attempt == 0 {
            x0.clone()
        } else {
            jitter(&x0, spec, &mut rng)
        };
        let mut obj = NegLogLik {
            problem: &problem,
            spec,
            nodes: options.nodes,
            accepted: None,
            pending: None,
        };
        let Some(res) = minimize(&mut obj, &start, &bfgs) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((b, _, _)) => (res.converged && !b.converged) || (res.converged == b.converged && res.f < b.f),
        };
        let converged = res.converged;
        if better {
            best = Some((res, attempt, obj.accepted.take()));
        }
        if converged {
            break;
        }
    }
    let (res, restarts, modes) = best.ok_or(Error::NonFiniteObjective)?;
    let theta_scaled = unpack(&res.x, spec)?;
    let theta = scaling.to_original(&theta_scaled, spec);
    // final value on the original covariate scale, from a cold start
    let cold = Problem::new(dataset, spec, None)?;
    let loglik = cold.marginal(&theta, options.nodes, None)?.value;
    let layout = report_layout(spec);
    let values = report_values(&theta, spec);
    let (ses, se_note) = if options.compute_se {
        match standard_errors(&problem, spec, &scaling, &res.x, options.nodes, modes.as_deref()) {
            Ok(se) => (se, None),
            Err(note) => (vec![None; values.len()], Some(note)),
        }
    } else {
        (vec![None; values.len()], Some("not requested".to_string()))
    };
    let estimates = layout
        .into_iter()
        .zip(values)
        .zip(ses)
        .map(|(((name, kind), estimate), se)| {
            let rse = se.filter(|_| estimate != 0.0).map(|s| 100.0 * s / estimate.abs());
            let p_value = match (kind, se) {
                (EstimateKind::Covariate, Some(s)) if s > 0.0 => {
                    Some(libm::erfc((estimate / s).abs() / std::f64::consts::SQRT_2))
                }
                _ => None,
            };
            ParameterEstimate {
                name,
                kind,
                estimate,
                se,
                rse,
                p_value,
            }
        })
        .collect();
    let omega = theta.omega(spec);
    let result = FitResult {
        structural: spec.structural().name().to_string(),
        summary: spec.summary(),
        parameter_names: spec.parameter_names(),
        transforms: spec.transforms().to_vec(),
        covariates: spec.covmap().clone(),
        pattern: (**spec.pattern()).clone(),
        error_kind: spec.error_kind(),
        omega: omega.row_iter().map(|r| r.iter().copied().collect()).collect(),
        theta,
        loglik,
        dims: theta_dims(spec),
        n_subjects: dataset.n_subjects(),
        n_total: dataset.n_total(),
        nodes: options.nodes,
        converged: res.converged,
        iterations: res.iterations,
        restarts,
        gradient_norm: res.grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        estimates,
        se_note,
        scaling,
    };
    if !result.converged {
        return Err(Error::MaxIterations {
            iterations: result.iterations,
            partial: Box::new(result),
        });
    }
    Ok(result)
}

/// Standard errors of the reported quantities: inverse finite-difference
/// Hessian of −log L in packed coordinates, mapped through the Jacobian of
/// the reporting transformation.
fn standard_errors(
    problem: &Problem<'_>,
    spec: &ModelSpec,
    scaling: &CovariateScaling,
    x: &[f64],
    nodes: usize,
    warm: Option<&[DVector<f64>]>,
) -> std::result::Result<Vec<Option<f64>>, String> {
    let p = x.len();
    let f = |x: &[f64]| -> std::result::Result<f64, String> {
        let theta = unpack(x, spec).map_err(|e| e.to_string())?;
        problem
            .marginal(&theta, nodes, warm)
            .map(|m| -m.value)
            .map_err(|e| format!("likelihood undefined near the estimate: {e}"))
    };
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let f0 = f(x)?;
    let mut hess = DMatrix::zeros(p, p);
    let mut xp = x.to_vec();
    for k in 0..p {
        xp[k] = x[k] + 2.0 * h[k];
        let up = f(&xp)?;
        xp[k] = x[k] - 2.0 * h[k];
        let down = f(&xp)?;
        xp[k] = x[k];
        hess[(k, k)] = (up - 2.0 * f0 + down) / (4.0 * h[k] * h[k]);
        for l in 0..k {
            let mut v = 0.0;
            for (sk, sl, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                xp[k] = x[k] + sk * h[k];
                xp[l] = x[l] + sl * h[l];
                v += sign * f(&xp)?;
            }
            xp[k] = x[k];
            xp[l] = x[l];
            let e = v / (4.0 * h[k] * h[l]);
            hess[(k, l)] = e;
            hess[(l, k)] = e;
        }
    }
    let cov = Cholesky::new(hess)
        .ok_or_else(|| "singular or indefinite information matrix".to_string())?
        .inverse();
    let report = |x: &[f64]| -> Vec<f64> {
        let theta = unpack(x, spec).expect("dimension checked");
        report_values(&scaling.to_original(&theta, spec), spec)
    };
    let r0 = report(x);
    let mut jac = DMatrix::zeros(r0.len(), p);
    let mut xp = x.to_vec();
    for k in 0..p {
        let step = 1e-6 * (1.0 + x[k].abs());
        xp[k] = x[k] + step;
        let up = report(&xp);
        xp[k] = x[k] - step;
        let down = report(&xp);
        xp[k] = x[k];
        for i in 0..r0.len() {
            jac[(i, k)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    let cov_r = &jac * cov * jac.transpose();
    Ok((0..r0.len())
        .map(|i| {
            let v = cov_r[(i, i)];
            (v >= 0.0 && v.is_finite()).then(|| v.sqrt())
        })
        .collect())
}
