//! Information criteria.
//!
//! Penalties use natural logarithms. `N` is the number of subjects and
//! `n_tot` the number of observations. Parameters attached to random effects
//! (the intercepts and covariate coefficients of random parameters plus the
//! free entries of Ω_R) are charged `log N`; fixed-effect coefficients and the
//! residual-error parameters are charged `log n_tot`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::model::ThetaDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    /// `−2ℓ + dim(β_R)·log N + (dim(β_F) + dim_error)·log n_tot`; used for
    /// covariate selection.
    BicH,
    /// `−2ℓ + |vec Ω_R|·log N`; used for covariance-structure selection.
    BicV,
    /// `−2ℓ + dim(θ_R)·log N + dim(θ_F)·log n_tot`.
    BicJoint,
    Aic,
    /// All parameters charged `log N`.
    BicN,
    /// All parameters charged `log n_tot`.
    BicNtot,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 6] = [
        CriterionKind::BicH,
        CriterionKind::BicV,
        CriterionKind::BicJoint,
        CriterionKind::Aic,
        CriterionKind::BicN,
        CriterionKind::BicNtot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CriterionKind::BicH => "bic_h",
            CriterionKind::BicV => "bic_v",
            CriterionKind::BicJoint => "bic_joint",
            CriterionKind::Aic => "aic",
            CriterionKind::BicN => "bic_n",
            CriterionKind::BicNtot => "bic_ntot",
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriterionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CriterionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown criterion `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionValue {
    pub kind: CriterionKind,
    pub value: f64,
    pub penalty: f64,
    pub dims_used: ThetaDims,
}

/// Criterion from its ingredients.
pub fn criterion_from_parts(
    kind: CriterionKind,
    loglik: f64,
    dims: &ThetaDims,
    n_subjects: usize,
    n_total: usize,
) -> Result<CriterionValue> {
    if n_subjects == 0 || n_total < n_subjects {
        return Err(Error::input(format!(
            "need N ≥ 1 and n_tot ≥ N, got N = {n_subjects}, n_tot = {n_total}"
        )));
    }
    if !loglik.is_finite() {
        return Err(Error::input("log-likelihood is not finite"));
    }
    let ln_n = (n_subjects as f64).ln();
    let ln_ntot = (n_total as f64).ln();
    let dim = |v: usize| v as f64;
    let penalty = match kind {
        CriterionKind::BicH => dim(dims.dim_beta_r) * ln_n + dim(dims.dim_beta_f + dims.dim_error) * ln_ntot,
        CriterionKind::BicV => dim(dims.dim_vec_omega) * ln_n,
        CriterionKind::BicJoint => dim(dims.dim_theta_r()) * ln_n + dim(dims.dim_theta_f()) * ln_ntot,
        CriterionKind::Aic => 2.0 * dim(dims.dim_theta()),
        CriterionKind::BicN => dim(dims.dim_theta()) * ln_n,
        CriterionKind::BicNtot => dim(dims.dim_theta()) * ln_ntot,
    };
    Ok(CriterionValue {
        kind,
        value: -2.0 * loglik + penalty,
        penalty,
        dims_used: *dims,
    })
}

/// Criterion of a fitted model.
pub fn criterion(fit: &FitResult, kind: CriterionKind) -> Result<CriterionValue> {
    criterion_from_parts(kind, fit.loglik, &fit.dims, fit.n_subjects, fit.n_total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(br: usize, bf: usize, vo: usize, e: usize) -> ThetaDims {
        ThetaDims {
            dim_beta_r: br,
            dim_beta_f: bf,
            dim_vec_omega: vo,
            dim_error: e,
        }
    }

    #[test]
    fn names_round_trip() {
        for k in CriterionKind::ALL {
            assert_eq!(k.as_str().parse::<CriterionKind>().unwrap(), k);
        }
        assert!("bic".parse::<CriterionKind>().is_err());
    }

    #[test]
    fn hand_computed() {
        let d = dims(3, 1, 4, 2);
        let ll = -100.0;
        let n: f64 = 10.0;
        let nt: f64 = 50.0;
        let v = |k| criterion_from_parts(k, ll, &d, 10, 50).unwrap().value;
        assert!((v(CriterionKind::BicH) - (200.0 + 3.0 * n.ln() + 3.0 * nt.ln())).abs() < 1e-12);
        assert!((v(CriterionKind::BicV) - (200.0 + 4.0 * n.ln())).abs() < 1e-12);
        assert!((v(CriterionKind::BicJoint) - (200.0 + 7.0 * n.ln() + 3.0 * nt.ln())).abs() < 1e-12);
        assert!((v(CriterionKind::Aic) - 220.0).abs() < 1e-12);
        assert!((v(CriterionKind::BicN) - (200.0 + 10.0 * n.ln())).abs() < 1e-12);
        assert!((v(CriterionKind::BicNtot) - (200.0 + 10.0 * nt.ln())).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_counts() {
        let d = dims(1, 0, 1, 1);
        assert!(criterion_from_parts(CriterionKind::Aic, 0.0, &d, 0, 5).is_err());
        assert!(criterion_from_parts(CriterionKind::Aic, 0.0, &d, 6, 5).is_err());
        assert!(criterion_from_parts(CriterionKind::Aic, f64::NAN, &d, 2, 5).is_err());
    }

    #[test]
    fn worked_examples() {
        let v = criterion_from_parts(CriterionKind::BicV, -850.0, &dims(2, 1, 4, 1), 53, 247).unwrap();
        assert!((v.value - 1715.881).abs() < 1e-3);
        let a = criterion_from_parts(CriterionKind::Aic, -50.0, &dims(1, 1, 2, 1), 10, 40).unwrap();
        assert_eq!(a.value, 110.0);
        // Amikacin final model: Q fixed with a sex effect, combined error.
        let d = dims(4, 2, 3, 2);
        let j = criterion_from_parts(CriterionKind::BicJoint, -700.0, &d, 53, 247).unwrap();
        let n = criterion_from_parts(CriterionKind::BicN, -700.0, &d, 53, 247).unwrap();
        assert!((j.value - n.value - 6.1559).abs() < 1e-3);
    }

    proptest::proptest! {
        #[test]
        fn penalties_are_nonnegative_and_ordered(
            br in 0usize..6, bf in 0usize..6, vo in 0usize..8, e in 1usize..3,
            n in 1usize..200, extra in 0usize..2000, ll in -1e4f64..1e4,
        ) {
            let d = dims(br, bf, vo, e);
            let nt = n + extra;
            let get = |k| criterion_from_parts(k, ll, &d, n, nt).unwrap().value;
            for k in CriterionKind::ALL {
                proptest::prop_assert!(get(k) >= -2.0 * ll - 1e-9);
            }
            proptest::prop_assert!(get(CriterionKind::BicN) <= get(CriterionKind::BicJoint) + 1e-9);
            proptest::prop_assert!(get(CriterionKind::BicJoint) <= get(CriterionKind::BicNtot) + 1e-9);
        }
    }
}
