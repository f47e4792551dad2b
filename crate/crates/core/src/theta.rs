//! Population parameter θ = (β, Ω_R, error parameters) and its packing
//! into an unconstrained optimizer vector.
//!
//! Ω_R is held through the free entries of its lower-triangular Cholesky
//! factor L. Positions where the pattern forces `Ω_R[r][s] = 0` are not
//! free: the corresponding entry of L is solved from the earlier entries so
//! that the zero holds exactly. Free entries are therefore in bijection with
//! positive-definite matrices carrying the pattern's zero structure.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{theta_dims, ModelSpec};
use crate::pattern::ValidatedPattern;
use crate::structural::ErrorModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    /// Intercept then covariate coefficients, parameter by parameter, on the
    /// transformed scale.
    pub beta: Vec<f64>,
    /// Free Cholesky entries of Ω_R in row-major lower-triangular order
    /// (see [`ValidatedPattern::free_cholesky_positions`]).
    pub omega_chol: Vec<f64>,
    /// Residual-error parameters (`a`, `b` as applicable), standard-deviation scale.
    pub error: Vec<f64>,
}

/// Full lower-triangular factor of Ω_R from the free entries.
pub fn cholesky_factor(pattern: &ValidatedPattern, free: &[f64]) -> DMatrix<f64> {
    let idx = pattern.random_indices();
    let n = idx.len();
    let mut l = DMatrix::zeros(n, n);
    let mut it = free.iter();
    for r in 0..n {
        for s in 0..=r {
            if r == s || pattern.is_correlated(idx[r], idx[s]) {
                l[(r, s)] = *it.next().expect("free entry count matches the pattern");
            } else {
                let mut acc = 0.0;
                for t in 0..s {
                    acc += l[(r, t)] * l[(s, t)];
                }
                l[(r, s)] = if l[(s, s)] == 0.0 { 0.0 } else { -acc / l[(s, s)] };
            }
        }
    }
    l
}

/// Free Cholesky entries reproducing `omega` (which must respect the pattern).
pub fn free_entries_from_omega(pattern: &ValidatedPattern, omega: &DMatrix<f64>) -> Result<Vec<f64>> {
    let idx = pattern.random_indices();
    let n = idx.len();
    if omega.nrows() != n || omega.ncols() != n {
        return Err(Error::Dimension(format!(
            "Ω_R must be {n}x{n}, got {}x{}",
            omega.nrows(),
            omega.ncols()
        )));
    }
    let mut omega = omega.clone();
    for r in 0..n {
        for s in 0..r {
            if pattern.is_correlated(idx[r], idx[s]) {
                continue;
            }
            let scale = (omega[(r, r)] * omega[(s, s)]).abs().sqrt();
            if omega[(r, s)].abs() > 1e-12 * scale {
                return Err(Error::input(format!(
                    "Ω_R has a non-zero entry at ({r}, {s}) where the pattern has no correlation"
                )));
            }
            omega[(r, s)] = 0.0;
            omega[(s, r)] = 0.0;
        }
    }
    let chol = nalgebra::Cholesky::new(omega)
        .ok_or_else(|| Error::NonPositiveVariance("Ω_R is not positive definite".into()))?;
    let l = chol.l();
    Ok(pattern
        .free_cholesky_positions()
        .into_iter()
        .map(|(r, s)| l[(r, s)])
        .collect())
}

impl ThetaVector {
    pub fn new(beta: Vec<f64>, omega_chol: Vec<f64>, error: Vec<f64>) -> Self {
        Self {
            beta,
            omega_chol,
            error,
        }
    }

    /// Build from an explicit Ω_R (random block, ascending parameter order).
    pub fn from_omega(spec: &ModelSpec, beta: Vec<f64>, omega: &DMatrix<f64>, error: Vec<f64>) -> Result<Self> {
        let theta = Self {
            beta,
            omega_chol: free_entries_from_omega(spec.pattern(), omega)?,
            error,
        };
        theta.check(spec)?;
        Ok(theta)
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let dims = theta_dims(spec);
        if self.beta.len() != spec.n_beta()
            || self.omega_chol.len() != dims.dim_vec_omega
            || self.error.len() != dims.dim_error
        {
            return Err(Error::Dimension(format!(
                "θ has {}/{}/{} β/Ω/error entries, spec {} expects {}/{}/{}",
                self.beta.len(),
                self.omega_chol.len(),
                self.error.len(),
                spec.summary(),
                spec.n_beta(),
                dims.dim_vec_omega,
                dims.dim_error
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.omega_chol.len() + self.error.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cholesky(&self, spec: &ModelSpec) -> DMatrix<f64> {
        cholesky_factor(spec.pattern(), &self.omega_chol)
    }

    /// Ω_R = L Lᵀ over the random block.
    pub fn omega(&self, spec: &ModelSpec) -> DMatrix<f64> {
        let l = self.cholesky(spec);
        &l * l.transpose()
    }

    pub fn error_model(&self, spec: &ModelSpec) -> ErrorModelSpec {
        ErrorModelSpec::from_params(spec.error_kind(), &self.error)
    }

    /// β entries of parameter `k`: intercept followed by covariate coefficients.
    pub fn beta_of<'a>(&'a self, spec: &ModelSpec, k: usize) -> &'a [f64] {
        let off = spec.beta_offset(k);
        &self.beta[off..off + 1 + spec.covmap().covariates(k).len()]
    }
}

/// θ -> unconstrained vector: β as is, Cholesky diagonals and error
/// parameters through `ln`, free off-diagonal Cholesky entries as is.
pub fn pack(theta: &ThetaVector, spec: &ModelSpec) -> Result<Vec<f64>> {
    theta.check(spec)?;
    let mut out = Vec::with_capacity(theta.len());
    out.extend_from_slice(&theta.beta);
    for ((r, s), &v) in spec.pattern().free_cholesky_positions().into_iter().zip(&theta.omega_chol) {
        if r == s {
            if !(v > 0.0) {
                return Err(Error::NonPositiveVariance(format!(
                    "Cholesky diagonal entry {r} is {v}"
                )));
            }
            out.push(v.ln());
        } else {
            out.push(v);
        }
    }
    for (i, &e) in theta.error.iter().enumerate() {
        if !(e > 0.0) {
            return Err(Error::NonPositiveVariance(format!("error parameter {i} is {e}")));
        }
        out.push(e.ln());
    }
    Ok(out)
}

pub fn unpack(x: &[f64], spec: &ModelSpec) -> Result<ThetaVector> {
    let dims = theta_dims(spec);
    let nb = spec.n_beta();
    if x.len() != nb + dims.dim_vec_omega + dims.dim_error {
        return Err(Error::Dimension(format!(
            "packed vector has {} entries, expected {}",
            x.len(),
            nb + dims.dim_vec_omega + dims.dim_error
        )));
    }
    let beta = x[..nb].to_vec();
    let omega_chol = spec
        .pattern()
        .free_cholesky_positions()
        .into_iter()
        .zip(&x[nb..nb + dims.dim_vec_omega])
        .map(|((r, s), &v)| if r == s { v.exp() } else { v })
        .collect();
    let error = x[nb + dims.dim_vec_omega..].iter().map(|v| v.exp()).collect();
    Ok(ThetaVector {
        beta,
        omega_chol,
        error,
    })
}
