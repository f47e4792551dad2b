//! Conditional and marginal log-likelihoods.
//!
//! For each subject the random block η_R is integrated out around the
//! empirical-Bayes mode: a damped Newton iteration locates the mode of
//! `log p(y_i | ψ_i) + log N(η_R; 0, Ω_R)`, then either the Laplace formula
//! or adaptive Gauss–Hermite quadrature (centered at the mode and scaled by
//! the inverse square root of the negative Hessian) gives `log p(y_i; θ)`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Subject};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Transform};
use crate::quadrature::GaussHermite;
use crate::structural::{ErrorModelSpec, StructuralModel};
use crate::theta::{pack, unpack, ThetaVector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Subjects above this count are evaluated on the rayon pool.
const PARALLEL_SUBJECTS: usize = 32;

/// Default cap on the tensor quadrature grid per subject.
pub const DEFAULT_GRID_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-8,
        }
    }
}

/// Centering and scaling applied to covariate columns before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateScaling {
    pub names: Vec<String>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl CovariateScaling {
    /// Mean and standard deviation of every covariate used by `spec`.
    pub fn from_dataset(dataset: &Dataset, spec: &ModelSpec) -> Result<Self> {
        let mut names: Vec<String> = spec.covmap().per_param().iter().flatten().cloned().collect();
        names.sort();
        names.dedup();
        let mut center = Vec::with_capacity(names.len());
        let mut scale = Vec::with_capacity(names.len());
        for n in &names {
            let col = dataset
                .covariate_column(n)
                .ok_or_else(|| Error::MissingCovariate(n.clone()))?;
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            let s = v.sqrt();
            center.push(m);
            scale.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
        }
        Ok(Self { names, center, scale })
    }

    pub fn identity() -> Self {
        Self {
            names: Vec::new(),
            center: Vec::new(),
            scale: Vec::new(),
        }
    }

    fn lookup(&self, name: &str) -> (f64, f64) {
        match self.names.iter().position(|n| n == name) {
            Some(i) => (self.center[i], self.scale[i]),
            None => (0.0, 1.0),
        }
    }

    /// Coefficients on standardized covariates -> coefficients on raw covariates.
    pub fn to_original(&self, theta: &ThetaVector, spec: &ModelSpec) -> ThetaVector {
        let mut out = theta.clone();
        for k in 0..spec.d() {
            let off = spec.beta_offset(k);
            let mut intercept = theta.beta[off];
            for (j, c) in spec.covmap().covariates(k).iter().enumerate() {
                let (m, s) = self.lookup(c);
                let b = theta.beta[off + 1 + j] / s;
                out.beta[off + 1 + j] = b;
                intercept -= b * m;
            }
            out.beta[off] = intercept;
        }
        out
    }

    /// Inverse of [`CovariateScaling::to_original`].
    pub fn to_scaled(&self, theta: &ThetaVector, spec: &ModelSpec) -> ThetaVector {
        let mut out = theta.clone();
        for k in 0..spec.d() {
            let off = spec.beta_offset(k);
            let mut intercept = theta.beta[off];
            for (j, c) in spec.covmap().covariates(k).iter().enumerate() {
                let (m, s) = self.lookup(c);
                let b = theta.beta[off + 1 + j];
                out.beta[off + 1 + j] = b * s;
                intercept += b * m;
            }
            out.beta[off] = intercept;
        }
        out
    }
}

/// Per-subject quantities after binding a spec to a dataset.
#[derive(Debug, Clone)]
struct SubjectDesign {
    id: String,
    /// Covariate values per parameter, in covariate-map order (scaled if requested).
    covariates: Vec<Vec<f64>>,
    times: Vec<f64>,
    ys: Vec<f64>,
    /// Regressors in the structural model's order, row-major by observation.
    regressors: Vec<f64>,
    n_reg: usize,
}

impl SubjectDesign {
    fn regs(&self, j: usize) -> &[f64] {
        &self.regressors[j * self.n_reg..(j + 1) * self.n_reg]
    }
}

/// θ-dependent quantities shared by all subjects.
#[derive(Debug, Clone)]
pub(crate) struct PopParams {
    beta: Vec<f64>,
    omega_inv: DMatrix<f64>,
    log_det_omega: f64,
    error: ErrorModelSpec,
}

/// Mode of the joint log-density over a subject's random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct EBResult {
    /// Random-effect block at the mode.
    pub eta_hat: DVector<f64>,
    /// Individual parameters at the mode, natural scale.
    pub psi_hat: Vec<f64>,
    /// Negative Hessian of the joint log-density at the mode.
    pub neg_hessian: DMatrix<f64>,
    /// Joint log-density `log p(y_i, η̂_i; θ)` including the prior normalization.
    pub joint_log_density: f64,
    pub converged: bool,
    pub inner_iterations: usize,
}

/// Marginal log-likelihood together with the per-subject modes used to
/// compute it (for warm starts).
#[derive(Debug, Clone)]
pub struct MarginalEval {
    pub value: f64,
    pub modes: Vec<DVector<f64>>,
}

/// A spec bound to a dataset.
pub(crate) struct Problem<'a> {
    spec: &'a ModelSpec,
    model: &'a dyn StructuralModel,
    transforms: Vec<Transform>,
    random: Vec<usize>,
    subjects: Vec<SubjectDesign>,
    pub inner: InnerOptions,
    pub grid_cap: usize,
}

fn bind_subject(
    dataset: &Dataset,
    s: &Subject,
    spec: &ModelSpec,
    reg_idx: &[usize],
    scaling: &CovariateScaling,
) -> SubjectDesign {
    let covariates = spec
        .covmap()
        .per_param()
        .iter()
        .map(|list| {
            list.iter()
                .map(|c| {
                    let v = s.covariates[dataset.covariate_index(c).expect("checked")];
                    let (m, sc) = scaling.lookup(c);
                    (v - m) / sc
                })
                .collect()
        })
        .collect();
    let mut regressors = Vec::with_capacity(s.n_obs() * reg_idx.len());
    for o in &s.observations {
        regressors.extend(reg_idx.iter().map(|&i| o.regressors[i]));
    }
    SubjectDesign {
        id: s.id.clone(),
        covariates,
        times: s.observations.iter().map(|o| o.time).collect(),
        ys: s.observations.iter().map(|o| o.y).collect(),
        regressors,
        n_reg: reg_idx.len(),
    }
}

impl<'a> Problem<'a> {
    pub fn new(dataset: &Dataset, spec: &'a ModelSpec, scaling: Option<&CovariateScaling>) -> Result<Self> {
        spec.check_dataset(dataset)?;
        let identity = CovariateScaling::identity();
        let scaling = scaling.unwrap_or(&identity);
        let reg_idx: Vec<usize> = spec
            .structural()
            .regressor_names()
            .iter()
            .map(|r| dataset.regressor_index(r).ok_or_else(|| Error::MissingRegressor(r.clone())))
            .collect::<Result<_>>()?;
        let subjects = dataset
            .subjects()
            .iter()
            .map(|s| bind_subject(dataset, s, spec, &reg_idx, scaling))
            .collect();
        Ok(Self {
            spec,
            model: spec.structural().as_ref(),
            transforms: spec.transforms().to_vec(),
            random: spec.pattern().random_indices(),
            subjects,
            inner: InnerOptions::default(),
            grid_cap: DEFAULT_GRID_CAP,
        })
    }

    pub fn pop_params(&self, theta: &ThetaVector) -> Result<PopParams> {
        theta.check(self.spec)?;
        let l = theta.cholesky(self.spec);
        let n = l.nrows();
        let mut log_det = 0.0;
        for r in 0..n {
            let v = l[(r, r)];
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositiveVariance(format!("Cholesky diagonal {r} is {v}")));
            }
            log_det += 2.0 * v.ln();
        }
        // Ω⁻¹ = L⁻ᵀ L⁻¹
        let omega_inv = if n > 0 {
            let linv = l
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .ok_or_else(|| Error::NonPositiveVariance("singular Ω_R factor".into()))?;
            linv.transpose() * linv
        } else {
            DMatrix::zeros(0, 0)
        };
        let error = theta.error_model(self.spec);
        for (i, e) in theta.error.iter().enumerate() {
            if !(*e > 0.0) || !e.is_finite() {
                return Err(Error::NonPositiveVariance(format!("error parameter {i} is {e}")));
            }
        }
        Ok(PopParams {
            beta: theta.beta.clone(),
            omega_inv,
            log_det_omega: log_det,
            error,
        })
    }

    fn phi_pop(&self, s: &SubjectDesign, pop: &PopParams) -> Vec<f64> {
        let mut off = 0;
        let mut phi = Vec::with_capacity(self.transforms.len());
        for covs in &s.covariates {
            let mut v = pop.beta[off];
            for (j, c) in covs.iter().enumerate() {
                v += pop.beta[off + 1 + j] * c;
            }
            phi.push(v);
            off += 1 + covs.len();
        }
        phi
    }

    fn psi_of(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter().zip(&self.transforms).map(|(p, t)| t.inverse(*p)).collect()
    }

    /// `Σ_j log φ(y_ij; C_ij, sd(C_ij))` at natural-scale `psi`.
    fn data_loglik(&self, s: &SubjectDesign, psi: &[f64], err: &ErrorModelSpec) -> Result<f64> {
        let mut ll = 0.0;
        for j in 0..s.times.len() {
            let c = self.model.predict(s.times[j], s.regs(j), psi)?;
            if !c.is_finite() {
                return Err(Error::NonFiniteLikelihood {
                    subject: s.id.clone(),
                    index: j,
                });
            }
            let sd = err.sd_with_derivative(c).0;
            let r = (s.ys[j] - c) / sd;
            ll += -0.5 * LN_2PI - sd.ln() - 0.5 * r * r;
        }
        Ok(ll)
    }

    /// Data log-likelihood and its gradient with respect to the Gaussian-scale
    /// parameters φ.
    fn data_loglik_grad(
        &self,
        s: &SubjectDesign,
        phi: &[f64],
        err: &ErrorModelSpec,
        grad_phi: &mut [f64],
    ) -> Result<f64> {
        let d = phi.len();
        let mut psi = vec![0.0; d];
        let mut dpsi = vec![0.0; d];
        for k in 0..d {
            let (v, dv) = self.transforms[k].inverse_with_derivative(phi[k]);
            psi[k] = v;
            dpsi[k] = dv;
        }
        let mut dc = vec![0.0; d];
        grad_phi.iter_mut().for_each(|g| *g = 0.0);
        let mut ll = 0.0;
        for j in 0..s.times.len() {
            let c = self.model.predict_with_gradient(s.times[j], s.regs(j), &psi, &mut dc)?;
            if !c.is_finite() {
                return Err(Error::NonFiniteLikelihood {
                    subject: s.id.clone(),
                    index: j,
                });
            }
            let (sd, dsd) = err.sd_with_derivative(c);
            let resid = s.ys[j] - c;
            let inv = 1.0 / sd;
            let z = resid * inv;
            ll += -0.5 * LN_2PI - sd.ln() - 0.5 * z * z;
            let dll_dc = z * inv + (z * z - 1.0) * inv * dsd;
            for k in 0..d {
                grad_phi[k] += dll_dc * dc[k];
            }
        }
        for k in 0..d {
            grad_phi[k] *= dpsi[k];
        }
        Ok(ll)
    }

    fn phi_at(&self, phi_pop: &[f64], eta: &DVector<f64>) -> Vec<f64> {
        let mut phi = phi_pop.to_vec();
        for (r, &k) in self.random.iter().enumerate() {
            phi[k] += eta[r];
        }
        phi
    }

    fn prior_logdens(&self, eta: &DVector<f64>, pop: &PopParams) -> f64 {
        let q = eta.dot(&(&pop.omega_inv * eta));
        -0.5 * q - 0.5 * pop.log_det_omega - 0.5 * self.random.len() as f64 * LN_2PI
    }

    /// Joint log-density `log p(y_i | ψ) + log N(η; 0, Ω_R)`.
    fn joint(&self, s: &SubjectDesign, phi_pop: &[f64], eta: &DVector<f64>, pop: &PopParams) -> Result<f64> {
        let phi = self.phi_at(phi_pop, eta);
        let psi = self.psi_of(&phi);
        Ok(self.data_loglik(s, &psi, &pop.error)? + self.prior_logdens(eta, pop))
    }

    /// Data-term gradient restricted to the random block.
    fn data_grad_eta(
        &self,
        s: &SubjectDesign,
        phi_pop: &[f64],
        eta: &DVector<f64>,
        pop: &PopParams,
    ) -> Result<(f64, DVector<f64>)> {
        let phi = self.phi_at(phi_pop, eta);
        let mut g = vec![0.0; phi.len()];
        let ll = self.data_loglik_grad(s, &phi, &pop.error, &mut g)?;
        Ok((ll, DVector::from_iterator(self.random.len(), self.random.iter().map(|&k| g[k]))))
    }

    /// Negative Hessian: analytic prior precision plus central differences of
    /// the analytic data gradient, symmetrized.
    fn neg_hessian(
        &self,
        s: &SubjectDesign,
        phi_pop: &[f64],
        eta: &DVector<f64>,
        pop: &PopParams,
    ) -> Result<DMatrix<f64>> {
        let n = eta.len();
        let mut h = DMatrix::zeros(n, n);
        let mut e = eta.clone();
        for r in 0..n {
            let step = 1e-5 * (1.0 + eta[r].abs());
            e[r] = eta[r] + step;
            let (_, gp) = self.data_grad_eta(s, phi_pop, &e, pop)?;
            e[r] = eta[r] - step;
            let (_, gm) = self.data_grad_eta(s, phi_pop, &e, pop)?;
            e[r] = eta[r];
            for c in 0..n {
                h[(c, r)] = -(gp[c] - gm[c]) / (2.0 * step);
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        Ok(h + &pop.omega_inv)
    }

    fn eb_subject(
        &self,
        s: &SubjectDesign,
        pop: &PopParams,
        start: Option<&DVector<f64>>,
    ) -> Result<EBResult> {
        let n = self.random.len();
        let phi_pop = self.phi_pop(s, pop);
        let mut eta = match start {
            Some(e) if e.len() == n && e.iter().all(|v| v.is_finite()) => e.clone(),
            _ => DVector::zeros(n),
        };
        let value_grad = |eta: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            let (ll, gd) = self.data_grad_eta(s, &phi_pop, eta, pop)?;
            let prec_eta = &pop.omega_inv * eta;
            let f = ll + self.prior_logdens(eta, pop);
            Ok((f, gd - prec_eta))
        };
        let (mut f, mut g) = match value_grad(&eta) {
            Ok(v) => v,
            Err(e) if start.is_some() => {
                // a stale warm start may sit outside the model's domain
                eta = DVector::zeros(n);
                let _ = e;
                value_grad(&eta)?
            }
            Err(e) => return Err(e),
        };
        let mut converged = false;
        let mut iterations = 0;
        loop {
            let h = self.neg_hessian(s, &phi_pop, &eta, pop)?;
            let step = ridge_solve(&h, &g);
            if g.norm() < self.inner.grad_tol || step.amax() < 1e-8 * (1.0 + eta.amax()) {
                // one extra full Newton step so the mode (and thus log det H)
                // does not depend on where the iteration started
                let trial = &eta + &step;
                if let Ok((ft, gt)) = value_grad(&trial) {
                    if ft.is_finite() && ft >= f - 1e-12 * (1.0 + f.abs()) && gt.norm() <= g.norm() {
                        eta = trial;
                        f = ft;
                        g = gt;
                    }
                }
                converged = true;
                break;
            }
            if iterations >= self.inner.max_iter {
                break;
            }
            iterations += 1;
            let slope = g.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            let mut stalled = false;
            for _ in 0..50 {
                let trial = &eta + &step * t;
                if let Ok((ft, gt)) = value_grad(&trial) {
                    if ft.is_finite() && ft >= f + 1e-4 * t * slope {
                        stalled = ft <= f;
                        eta = trial;
                        f = ft;
                        g = gt;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted || stalled {
                // no ascent available at working precision
                converged = g.norm() < 1e-5 * (1.0 + f.abs());
                break;
            }
        }
        if !converged {
            return Err(Error::InnerNonConvergence {
                subject: s.id.clone(),
                iterations,
                gradient_norm: g.norm(),
            });
        }
        let neg_hessian = self.neg_hessian(s, &phi_pop, &eta, pop)?;
        let psi_hat = self.psi_of(&self.phi_at(&phi_pop, &eta));
        Ok(EBResult {
            eta_hat: eta,
            psi_hat,
            neg_hessian,
            joint_log_density: f,
            converged,
            inner_iterations: iterations,
        })
    }

    /// One subject's marginal log-likelihood contribution.
    fn subject_marginal(
        &self,
        s: &SubjectDesign,
        pop: &PopParams,
        nodes: usize,
        start: Option<&DVector<f64>>,
    ) -> Result<(f64, DVector<f64>)> {
        let n = self.random.len();
        if n == 0 {
            let psi = self.psi_of(&self.phi_pop(s, pop));
            return Ok((self.data_loglik(s, &psi, &pop.error)?, DVector::zeros(0)));
        }
        let eb = self.eb_subject(s, pop, start)?;
        let (l, log_det_h) = cholesky_with_ridge(&eb.neg_hessian).ok_or_else(|| {
            Error::InnerNonConvergence {
                subject: s.id.clone(),
                iterations: eb.inner_iterations,
                gradient_norm: f64::NAN,
            }
        })?;
        let laplace = eb.joint_log_density + 0.5 * n as f64 * LN_2PI - 0.5 * log_det_h;
        if nodes <= 1 {
            return Ok((laplace, eb.eta_hat));
        }
        let rule = GaussHermite::new(nodes);
        let phi_pop = self.phi_pop(s, pop);
        let lt = l.transpose();
        let total = nodes.pow(n as u32);
        let mut idx = vec![0usize; n];
        let mut terms = Vec::with_capacity(total);
        for _ in 0..total {
            let z = DVector::from_iterator(n, idx.iter().map(|&i| rule.nodes[i]));
            let logw: f64 = idx.iter().map(|&i| rule.weights[i].ln()).sum();
            let offset = lt
                .solve_upper_triangular(&z)
                .expect("Cholesky factor has a positive diagonal");
            let eta = &eb.eta_hat + offset * std::f64::consts::SQRT_2;
            if let Ok(f) = self.joint(s, &phi_pop, &eta, pop) {
                if f.is_finite() {
                    terms.push(logw + f + z.norm_squared());
                }
            }
            // odometer increment
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < nodes {
                    break;
                }
                *slot = 0;
            }
        }
        let value = log_sum_exp(&terms) + 0.5 * n as f64 * std::f64::consts::LN_2 - 0.5 * log_det_h;
        Ok((value, eb.eta_hat))
    }

    pub fn check_grid(&self, nodes: usize) -> Result<()> {
        if nodes == 0 {
            return Err(Error::input("quadrature needs at least one node"));
        }
        let size = (nodes as u128).pow(self.random.len() as u32);
        if size > self.grid_cap as u128 {
            return Err(Error::GridTooLarge {
                size,
                cap: self.grid_cap,
            });
        }
        Ok(())
    }

    /// Marginal log-likelihood with `nodes`-point adaptive quadrature
    /// (`nodes = 1` is the Laplace approximation).
    pub fn marginal(
        &self,
        theta: &ThetaVector,
        nodes: usize,
        warm: Option<&[DVector<f64>]>,
    ) -> Result<MarginalEval> {
        self.check_grid(nodes)?;
        let pop = self.pop_params(theta)?;
        let eval = |i: usize| {
            let start = warm.and_then(|w| w.get(i));
            self.subject_marginal(&self.subjects[i], &pop, nodes, start)
        };
        let parts: Vec<Result<(f64, DVector<f64>)>> = if self.subjects.len() >= PARALLEL_SUBJECTS {
            (0..self.subjects.len()).into_par_iter().map(eval).collect()
        } else {
            (0..self.subjects.len()).map(eval).collect()
        };
        let mut value = 0.0;
        let mut modes = Vec::with_capacity(parts.len());
        for p in parts {
            let (v, m) = p?;
            value += v;
            modes.push(m);
        }
        Ok(MarginalEval { value, modes })
    }

    /// Sum of squared residuals when every subject shares `psi`.
    pub fn pooled_sse(&self, psi: &[f64]) -> Option<f64> {
        let mut sse = 0.0;
        for s in &self.subjects {
            for j in 0..s.times.len() {
                let c = self.model.predict(s.times[j], s.regs(j), psi).ok()?;
                sse += (s.ys[j] - c).powi(2);
            }
        }
        sse.is_finite().then_some(sse)
    }

    pub fn n_total(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len()).sum()
    }

    pub fn eb(&self, i: usize, theta: &ThetaVector, start: Option<&DVector<f64>>) -> Result<EBResult> {
        let pop = self.pop_params(theta)?;
        self.eb_subject(&self.subjects[i], &pop, start)
    }
}

/// Solve `H x = g`; an indefinite `H` is replaced by its absolute-eigenvalue
/// counterpart after diagonal equilibration.
fn ridge_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return c.solve(g);
    }
    // Indefinite: equilibrate the diagonal, then use |eigenvalues| (floored)
    // so the step is an ascent direction whatever the scale spread.
    let n = h.nrows();
    let d = DVector::from_iterator(n, h.diagonal().iter().map(|v| 1.0 / v.abs().max(1e-300).sqrt()));
    let hs = DMatrix::from_fn(n, n, |r, c| d[r] * h[(r, c)] * d[c]);
    let eig = SymmetricEigen::new(hs);
    let top = eig.eigenvalues.amax().max(1e-300);
    let gs = g.component_mul(&d);
    let mut coef = eig.eigenvectors.transpose() * gs;
    for (c, lambda) in coef.iter_mut().zip(eig.eigenvalues.iter()) {
        *c /= lambda.abs().max(1e-8 * top);
    }
    (eig.eigenvectors * coef).component_mul(&d)
}

/// Lower Cholesky factor and `log det`, with a Levenberg-style ridge starting
/// at `1e-8` if the plain factorization fails.
fn cholesky_with_ridge(h: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let scale = h.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut lambda = 0.0;
    for _ in 0..12 {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += lambda;
        }
        if let Some(c) = Cholesky::new(hr) {
            let l = c.l();
            let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            if log_det.is_finite() {
                return Some((l, log_det));
            }
        }
        lambda = if lambda == 0.0 { 1e-8 * scale } else { lambda * 10.0 };
    }
    None
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Public entry points on raw (unscaled) θ
// ---------------------------------------------------------------------------

/// `Σ_j log φ(y_ij; C_ij, sd(C_ij))` for one subject at natural-scale `psi`.
pub fn conditional_loglik(
    dataset: &Dataset,
    subject: usize,
    psi: &[f64],
    spec: &ModelSpec,
    error: &ErrorModelSpec,
) -> Result<f64> {
    let problem = Problem::new(dataset, spec, None)?;
    if psi.len() != spec.d() {
        return Err(Error::Dimension(format!("ψ has {} entries, expected {}", psi.len(), spec.d())));
    }
    problem.data_loglik(&problem.subjects[subject], psi, error)
}

/// Empirical-Bayes mode of subject `subject` (cold start at η_R = 0).
pub fn eb_mode(dataset: &Dataset, subject: usize, theta: &ThetaVector, spec: &ModelSpec) -> Result<EBResult> {
    if spec.pattern().n_random() == 0 {
        return Err(Error::input("the covariance pattern has no random component"));
    }
    let problem = Problem::new(dataset, spec, None)?;
    problem.eb(subject, theta, None)
}

/// As [`eb_mode`], starting the Newton iteration at `start` (η_R).
pub fn eb_mode_from(
    dataset: &Dataset,
    subject: usize,
    theta: &ThetaVector,
    spec: &ModelSpec,
    start: &[f64],
) -> Result<EBResult> {
    if spec.pattern().n_random() == 0 {
        return Err(Error::input("the covariance pattern has no random component"));
    }
    if start.len() != spec.pattern().n_random() {
        return Err(Error::Dimension(format!(
            "start has {} entries, the pattern has {} random effects",
            start.len(),
            spec.pattern().n_random()
        )));
    }
    let problem = Problem::new(dataset, spec, None)?;
    problem.eb(subject, theta, Some(&DVector::from_column_slice(start)))
}

pub fn marginal_loglik_laplace(dataset: &Dataset, theta: &ThetaVector, spec: &ModelSpec) -> Result<f64> {
    Ok(Problem::new(dataset, spec, None)?.marginal(theta, 1, None)?.value)
}

pub fn marginal_loglik_agq(dataset: &Dataset, theta: &ThetaVector, spec: &ModelSpec, nodes: usize) -> Result<f64> {
    Ok(Problem::new(dataset, spec, None)?.marginal(theta, nodes, None)?.value)
}

/// Central-difference gradient of the Laplace log-likelihood in the packed
/// parameter space, step `1e-5·(1 + |x_k|)`.
pub fn marginal_gradient(dataset: &Dataset, theta: &ThetaVector, spec: &ModelSpec) -> Result<Vec<f64>> {
    let problem = Problem::new(dataset, spec, None)?;
    let x = pack(theta, spec)?;
    let base = problem.marginal(theta, 1, None)?;
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.clone();
    for k in 0..x.len() {
        let h = 1e-5 * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let up = problem.marginal(&unpack(&xp, spec)?, 1, Some(&base.modes))?.value;
        xp[k] = x[k] - h;
        let down = problem.marginal(&unpack(&xp, spec)?, 1, Some(&base.modes))?.value;
        xp[k] = x[k];
        grad[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, Subject};
    use crate::model::CovariateMap;
    use crate::pattern::CovariancePattern;
    use crate::structural::{ErrorKind, OneCptOral, PolynomialTime};
    use std::sync::Arc;

    fn one_subject(times: &[f64], ys: &[f64]) -> Dataset {
        Dataset::new(
            vec!["dose".into()],
            vec!["z".into()],
            vec![Subject {
                id: "s1".into(),
                observations: times
                    .iter()
                    .zip(ys)
                    .map(|(&t, &y)| Observation {
                        time: t,
                        regressors: vec![100.0],
                        y,
                    })
                    .collect(),
                covariates: vec![0.0],
            }],
        )
        .unwrap()
    }

    fn oral_spec(pattern: CovariancePattern) -> ModelSpec {
        ModelSpec::new(
            Arc::new(OneCptOral),
            vec![Transform::Log; 3],
            CovariateMap::empty(3),
            pattern,
            ErrorKind::Additive,
        )
        .unwrap()
    }

    #[test]
    fn conditional_loglik_at_the_mean() {
        let psi = [1.0, 0.1, 20.0];
        let c = crate::structural::onecpt_oral(100.0, 2.0, psi[0], psi[1], psi[2]);
        let ds = one_subject(&[2.0], &[c]);
        let spec = oral_spec(CovariancePattern::none(3));
        let a = 0.3;
        let ll = conditional_loglik(&ds, 0, &psi, &spec, &ErrorModelSpec::additive(a)).unwrap();
        assert!((ll - (-0.5 * LN_2PI - a.ln())).abs() < 1e-14);
        let ds2 = one_subject(&[2.0, 2.0], &[c, c]);
        let ll2 = conditional_loglik(&ds2, 0, &psi, &spec, &ErrorModelSpec::additive(a)).unwrap();
        assert_eq!(ll2, 2.0 * ll);
    }

    #[test]
    fn conditional_loglik_matches_naive_sum() {
        let times = [1.0, 2.0, 4.0, 7.0, 10.0, 15.0, 20.0, 30.0, 40.0];
        let psi = [1.2, 0.09, 18.0];
        let ys: Vec<f64> = times
            .iter()
            .enumerate()
            .map(|(j, &t)| crate::structural::onecpt_oral(100.0, t, 1.0, 0.1, 20.0) + 0.1 * (j as f64 - 4.0))
            .collect();
        let ds = one_subject(&times, &ys);
        let err = ErrorModelSpec::combined(0.2, 0.1);
        let spec = oral_spec(CovariancePattern::none(3));
        let ll = conditional_loglik(&ds, 0, &psi, &spec, &err).unwrap();
        let mut naive = 0.0;
        for (t, y) in times.iter().zip(&ys) {
            let c = crate::structural::onecpt_oral(100.0, *t, psi[0], psi[1], psi[2]);
            let sd = 0.2 + 0.1 * c;
            naive += -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * ((y - c) / sd).powi(2);
        }
        assert!((ll - naive).abs() < 1e-12);
    }

    #[test]
    fn eb_mode_at_generator_for_noiseless_data() {
        let times = [1.0, 2.0, 4.0, 7.0, 10.0];
        let ys: Vec<f64> = times
            .iter()
            .map(|&t| crate::structural::onecpt_oral(100.0, t, 1.0, 0.1, 20.0))
            .collect();
        let ds = one_subject(&times, &ys);
        let spec = oral_spec(CovariancePattern::all_random(3));
        let beta = vec![1f64.ln(), 0.1f64.ln(), 20f64.ln()];
        let theta = ThetaVector::from_omega(&spec, beta, &(DMatrix::identity(3, 3) * 0.04), vec![1e-4]).unwrap();
        let eb = eb_mode(&ds, 0, &theta, &spec).unwrap();
        assert!(eb.converged);
        assert!(eb.eta_hat.amax() < 1e-6, "{}", eb.eta_hat);
    }

    #[test]
    fn eb_mode_shrinks_to_population_when_omega_vanishes() {
        let times = [1.0, 2.0, 4.0];
        let ds = one_subject(&times, &[3.0, 4.5, 2.0]);
        let spec = oral_spec(CovariancePattern::all_random(3));
        let beta = vec![0.0, (0.1f64).ln(), (20f64).ln()];
        let theta = ThetaVector::from_omega(&spec, beta.clone(), &(DMatrix::identity(3, 3) * 1e-12), vec![0.3]).unwrap();
        let eb = eb_mode(&ds, 0, &theta, &spec).unwrap();
        for k in 0..3 {
            assert!((eb.psi_hat[k].ln() - beta[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn eb_mode_linear_matches_gls() {
        // y = c0 + c1 t with both random; posterior mode is the Gaussian
        // posterior mean (Zᵀ Z / σ² + Ω⁻¹)⁻¹ Zᵀ (y − Z β) / σ².
        let times = [0.0, 1.0, 2.0, 3.5];
        let ys = [1.0, 2.7, 3.9, 6.2];
        let ds = one_subject(&times, &ys);
        let spec = ModelSpec::new(
            Arc::new(PolynomialTime::new(2)),
            vec![Transform::Identity; 2],
            CovariateMap::empty(2),
            CovariancePattern::all_random(2).with_correlation(0, 1),
            ErrorKind::Additive,
        )
        .unwrap();
        let omega = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let beta = vec![0.8, 1.2];
        let sigma = 0.4;
        let theta = ThetaVector::from_omega(&spec, beta.clone(), &omega, vec![sigma]).unwrap();
        let eb = eb_mode(&ds, 0, &theta, &spec).unwrap();
        let z = DMatrix::from_fn(4, 2, |i, j| times[i].powi(j as i32));
        let r = DVector::from_iterator(4, (0..4).map(|i| ys[i] - beta[0] - beta[1] * times[i]));
        let prec = z.transpose() * &z / (sigma * sigma) + omega.clone().try_inverse().unwrap();
        let mode = prec.try_inverse().unwrap() * z.transpose() * r / (sigma * sigma);
        assert!((eb.eta_hat - mode).amax() < 1e-9);
    }

    #[test]
    fn agq_single_node_is_laplace_and_grid_cap_is_enforced() {
        let times = [1.0, 2.0, 4.0, 7.0];
        let ds = one_subject(&times, &[3.0, 4.1, 3.5, 2.4]);
        let spec = oral_spec(CovariancePattern::all_random(3));
        let theta = ThetaVector::from_omega(
            &spec,
            vec![0.0, 0.1f64.ln(), 20f64.ln()],
            &(DMatrix::identity(3, 3) * 0.09),
            vec![0.3],
        )
        .unwrap();
        let lap = marginal_loglik_laplace(&ds, &theta, &spec).unwrap();
        let agq1 = marginal_loglik_agq(&ds, &theta, &spec, 1).unwrap();
        assert_eq!(lap.to_bits(), agq1.to_bits());
        assert!(matches!(
            marginal_loglik_agq(&ds, &theta, &spec, 47),
            Err(Error::GridTooLarge { .. })
        ));
    }

    #[test]
    fn no_random_effects_is_exact_conditional_sum() {
        let times = [1.0, 2.0, 4.0];
        let ds = one_subject(&times, &[3.0, 4.5, 2.0]);
        let spec = oral_spec(CovariancePattern::none(3));
        let beta = vec![0.0, (0.1f64).ln(), (20f64).ln()];
        let theta = ThetaVector::new(beta.clone(), vec![], vec![0.3]);
        let lap = marginal_loglik_laplace(&ds, &theta, &spec).unwrap();
        let psi: Vec<f64> = beta.iter().map(|b| b.exp()).collect();
        let cond = conditional_loglik(&ds, 0, &psi, &spec, &ErrorModelSpec::additive(0.3)).unwrap();
        assert_eq!(lap, cond);
    }

    #[test]
    fn scaling_round_trip() {
        let spec = ModelSpec::new(
            Arc::new(OneCptOral),
            vec![Transform::Log; 3],
            CovariateMap::new(vec![vec!["z".into()], vec![], vec!["z".into()]]).unwrap(),
            CovariancePattern::all_random(3),
            ErrorKind::Additive,
        )
        .unwrap();
        let sc = CovariateScaling {
            names: vec!["z".into()],
            center: vec![3.0],
            scale: vec![2.0],
        };
        let th = ThetaVector::new(vec![0.1, 0.5, -2.0, 3.0, -0.25], vec![0.1, 0.2, 0.3], vec![0.3]);
        let back = sc.to_original(&sc.to_scaled(&th, &spec), &spec);
        for (a, b) in th.beta.iter().zip(&back.beta) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn indefinite_hessian_step_ascends_at_natural_length() {
        // A huge prior precision on one coordinate must not shrink the step
        // along a negatively curved one.
        let h = DMatrix::from_row_slice(2, 2, &[4e15, 28.0, 28.0, -165.0]);
        let g = DVector::from_vec(vec![1e-8, -590.0]);
        let step = ridge_solve(&h, &g);
        assert!(g.dot(&step) > 0.0);
        assert!((step[1] + 590.0 / 165.0).abs() < 1e-6, "{step}");
        let pd = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let exact = pd.clone().cholesky().unwrap().solve(&g);
        assert_eq!(ridge_solve(&pd, &g), exact);
    }
}
