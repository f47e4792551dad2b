//! Closed-form structural models and the residual error model.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};

/// Mean function of the individual-level model.
///
/// `regressors` arrive in the order of [`StructuralModel::regressor_names`];
/// `psi` is on the natural scale, ordered as [`StructuralModel::parameter_names`].
pub trait StructuralModel: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn parameter_names(&self) -> Vec<String>;
    fn regressor_names(&self) -> Vec<String>;
    fn predict(&self, time: f64, regressors: &[f64], psi: &[f64]) -> Result<f64>;

    fn arity(&self) -> usize {
        self.parameter_names().len()
    }

    /// Prediction and its gradient with respect to `psi`. The default uses
    /// central differences; built-in models override it with exact
    /// forward-mode derivatives.
    fn predict_with_gradient(
        &self,
        time: f64,
        regressors: &[f64],
        psi: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        let value = self.predict(time, regressors, psi)?;
        let mut p = psi.to_vec();
        for k in 0..psi.len() {
            let h = 1e-6 * psi[k].abs().max(1e-3);
            p[k] = psi[k] + h;
            let up = self.predict(time, regressors, &p)?;
            p[k] = psi[k] - h;
            let down = self.predict(time, regressors, &p)?;
            p[k] = psi[k];
            grad[k] = (up - down) / (2.0 * h);
        }
        Ok(value)
    }
}

fn domain(model: &'static str, message: impl Into<String>) -> Error {
    Error::Domain {
        model,
        message: message.into(),
    }
}

fn positive(model: &'static str, pairs: &[(&str, f64)]) -> Result<()> {
    for (name, v) in pairs {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(domain(model, format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// One compartment, zero-order infusion
// ---------------------------------------------------------------------------

fn onecpt_infusion_core<T: Real>(dose: f64, dt: f64, tinf: f64, k: T, v: T) -> T {
    let scale = T::cst(dose) / (k * v * tinf);
    if dt <= tinf {
        scale * (T::cst(1.0) - (-k * dt).exp())
    } else {
        scale * (T::cst(1.0) - (-k * tinf).exp()) * (-k * (dt - tinf)).exp()
    }
}

/// Concentration after a single infusion of `dose` started at `t_dose` and
/// lasting `tinf`, one compartment with elimination rate `k` and volume `v`.
pub fn onecpt_infusion(dose: f64, t: f64, t_dose: f64, tinf: f64, k: f64, v: f64) -> Result<f64> {
    const M: &str = "onecpt_infusion";
    positive(M, &[("Tinf", tinf), ("k", k), ("V", v)])?;
    if !(t >= t_dose) {
        return Err(domain(M, format!("time {t} precedes the dose time {t_dose}")));
    }
    Ok(onecpt_infusion_core(dose, t - t_dose, tinf, k, v))
}

#[derive(Debug, Clone, Copy)]
pub struct OneCptInfusion;

impl StructuralModel for OneCptInfusion {
    fn name(&self) -> &str {
        "onecpt_infusion"
    }
    fn parameter_names(&self) -> Vec<String> {
        vec!["k".into(), "V".into()]
    }
    fn regressor_names(&self) -> Vec<String> {
        vec!["dose".into(), "tD".into(), "tinf".into()]
    }
    fn predict(&self, t: f64, r: &[f64], psi: &[f64]) -> Result<f64> {
        onecpt_infusion(r[0], t, r[1], r[2], psi[0], psi[1])
    }
    fn predict_with_gradient(&self, t: f64, r: &[f64], psi: &[f64], g: &mut [f64]) -> Result<f64> {
        self.predict(t, r, psi)?;
        let c = onecpt_infusion_core(
            r[0],
            t - r[1],
            r[2],
            Dual::<2>::var(psi[0], 0),
            Dual::<2>::var(psi[1], 1),
        );
        g.copy_from_slice(&c.d);
        Ok(c.v)
    }
}

// ---------------------------------------------------------------------------
// Two compartments, zero-order infusion
// ---------------------------------------------------------------------------

/// Macro-constants of the two-compartment model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoCptRates {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
}

const DISCRIMINANT_TOL: f64 = 1e-12;

fn twocpt_rates_core<T: Real>(q: T, cl: T, v1: T, v2: T) -> Result<(T, T, T, T)> {
    let k12 = q / v1;
    let k21 = q / v2;
    let k10 = cl / v1;
    let s = k12 + k21 + k10;
    let disc = s * s - k21 * k10 * 4.0;
    let sv = s.value();
    if !(disc.value() > DISCRIMINANT_TOL * sv * sv) {
        return Err(Error::DegenerateEigenvalues {
            discriminant: disc.value(),
        });
    }
    let beta = (s - disc.sqrt()) * 0.5;
    let alpha = q * cl / (v1 * v2 * beta);
    let inv_v1 = T::cst(1.0) / v1;
    let a = inv_v1 * (alpha - k21) / (alpha - beta);
    let b = inv_v1 * (beta - k21) / (beta - alpha);
    Ok((a, b, alpha, beta))
}

pub fn twocpt_rates(q: f64, cl: f64, v1: f64, v2: f64) -> Result<TwoCptRates> {
    positive("twocpt_infusion", &[("Q", q), ("Cl", cl), ("V1", v1), ("V2", v2)])?;
    let (a, b, alpha, beta) = twocpt_rates_core(q, cl, v1, v2)?;
    Ok(TwoCptRates { a, b, alpha, beta })
}

fn twocpt_core<T: Real>(dose: f64, dt: f64, tinf: f64, p: [T; 4]) -> Result<T> {
    let (a, b, alpha, beta) = twocpt_rates_core(p[0], p[1], p[2], p[3])?;
    let one = T::cst(1.0);
    let scale = dose / tinf;
    let c = if dt <= tinf {
        a / alpha * (one - (-alpha * dt).exp()) + b / beta * (one - (-beta * dt).exp())
    } else {
        let after = dt - tinf;
        a / alpha * (one - (-alpha * tinf).exp()) * (-alpha * after).exp()
            + b / beta * (one - (-beta * tinf).exp()) * (-beta * after).exp()
    };
    Ok(c * scale)
}

#[allow(clippy::too_many_arguments)]
pub fn twocpt_infusion(
    dose: f64,
    t: f64,
    t_dose: f64,
    tinf: f64,
    q: f64,
    cl: f64,
    v1: f64,
    v2: f64,
) -> Result<f64> {
    const M: &str = "twocpt_infusion";
    positive(M, &[("Tinf", tinf), ("Q", q), ("Cl", cl), ("V1", v1), ("V2", v2)])?;
    if !(t >= t_dose) {
        return Err(domain(M, format!("time {t} precedes the dose time {t_dose}")));
    }
    twocpt_core(dose, t - t_dose, tinf, [q, cl, v1, v2])
}

#[derive(Debug, Clone, Copy)]
pub struct TwoCptInfusion;

impl StructuralModel for TwoCptInfusion {
    fn name(&self) -> &str {
        "twocpt_infusion"
    }
    fn parameter_names(&self) -> Vec<String> {
        ["Q", "Cl", "V1", "V2"].map(String::from).to_vec()
    }
    fn regressor_names(&self) -> Vec<String> {
        vec!["dose".into(), "tD".into(), "tinf".into()]
    }
    fn predict(&self, t: f64, r: &[f64], psi: &[f64]) -> Result<f64> {
        twocpt_infusion(r[0], t, r[1], r[2], psi[0], psi[1], psi[2], psi[3])
    }
    fn predict_with_gradient(&self, t: f64, r: &[f64], psi: &[f64], g: &mut [f64]) -> Result<f64> {
        self.predict(t, r, psi)?;
        let p = [0, 1, 2, 3].map(|i| Dual::<4>::var(psi[i], i));
        let c = twocpt_core(r[0], t - r[1], r[2], p)?;
        g.copy_from_slice(&c.d);
        Ok(c.v)
    }
}

// ---------------------------------------------------------------------------
// One compartment, first-order absorption
// ---------------------------------------------------------------------------

const ORAL_LIMIT_TOL: f64 = 1e-8;

fn onecpt_oral_core<T: Real>(dose: f64, t: f64, ka: T, k: T, v: T) -> T {
    let (kav, kv) = (ka.value(), k.value());
    if (kav - kv).abs() < ORAL_LIMIT_TOL * kav.max(kv) {
        // (e^{-kt} - e^{-ka t}) / (ka - k) -> t e^{-m t} with m the mean rate
        let m = (ka + k) * 0.5;
        ka * dose * t * (-m * t).exp() / v
    } else {
        ka * dose / (v * (ka - k)) * ((-k * t).exp() - (-ka * t).exp())
    }
}

/// Oral single-dose concentration with absorption rate `ka`, elimination
/// rate `k` and volume `v`.
pub fn onecpt_oral(dose: f64, t: f64, ka: f64, k: f64, v: f64) -> f64 {
    onecpt_oral_core(dose, t, ka, k, v)
}

#[derive(Debug, Clone, Copy)]
pub struct OneCptOral;

impl StructuralModel for OneCptOral {
    fn name(&self) -> &str {
        "onecpt_oral"
    }
    fn parameter_names(&self) -> Vec<String> {
        vec!["ka".into(), "k".into(), "V".into()]
    }
    fn regressor_names(&self) -> Vec<String> {
        vec!["dose".into()]
    }
    fn predict(&self, t: f64, r: &[f64], psi: &[f64]) -> Result<f64> {
        const M: &str = "onecpt_oral";
        positive(M, &[("ka", psi[0]), ("k", psi[1]), ("V", psi[2])])?;
        if !(t >= 0.0) {
            return Err(domain(M, format!("negative time {t}")));
        }
        Ok(onecpt_oral(r[0], t, psi[0], psi[1], psi[2]))
    }
    fn predict_with_gradient(&self, t: f64, r: &[f64], psi: &[f64], g: &mut [f64]) -> Result<f64> {
        self.predict(t, r, psi)?;
        let p = [0, 1, 2].map(|i| Dual::<3>::var(psi[i], i));
        let c = onecpt_oral_core(r[0], t, p[0], p[1], p[2]);
        g.copy_from_slice(&c.d);
        Ok(c.v)
    }
}

// ---------------------------------------------------------------------------
// Polynomial in time (mean linear in psi)
// ---------------------------------------------------------------------------

/// `psi_0 + psi_1 t + ... + psi_{n-1} t^{n-1}`. The mean is linear in the
/// individual parameters, which makes the marginal likelihood available in
/// closed form under identity transforms and additive error.
#[derive(Debug, Clone)]
pub struct PolynomialTime {
    name: String,
    arity: usize,
}

impl PolynomialTime {
    pub fn new(arity: usize) -> Self {
        assert!(arity >= 1);
        Self {
            name: format!("poly{arity}"),
            arity,
        }
    }
}

impl StructuralModel for PolynomialTime {
    fn name(&self) -> &str {
        &self.name
    }
    fn parameter_names(&self) -> Vec<String> {
        (0..self.arity).map(|k| format!("c{k}")).collect()
    }
    fn regressor_names(&self) -> Vec<String> {
        Vec::new()
    }
    fn arity(&self) -> usize {
        self.arity
    }
    fn predict(&self, t: f64, _: &[f64], psi: &[f64]) -> Result<f64> {
        Ok(psi.iter().rev().fold(0.0, |acc, c| acc * t + c))
    }
    fn predict_with_gradient(&self, t: f64, _: &[f64], psi: &[f64], g: &mut [f64]) -> Result<f64> {
        let mut p = 1.0;
        let mut value = 0.0;
        for k in 0..self.arity {
            g[k] = p;
            value += psi[k] * p;
            p *= t;
        }
        Ok(value)
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Structural models addressable by name from model documents.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<dyn StructuralModel>>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `onecpt_infusion`, `twocpt_infusion`, `onecpt_oral` and `poly1`..`poly4`.
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(OneCptInfusion));
        r.register(Arc::new(TwoCptInfusion));
        r.register(Arc::new(OneCptOral));
        for n in 1..=4 {
            r.register(Arc::new(PolynomialTime::new(n)));
        }
        r
    }

    pub fn register(&mut self, model: Arc<dyn StructuralModel>) {
        self.models.insert(model.name().to_string(), model);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn StructuralModel>> {
        self.models
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}

// ---------------------------------------------------------------------------
// Residual error model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Additive,
    Proportional,
    Combined,
}

impl ErrorKind {
    pub fn n_params(self) -> usize {
        match self {
            ErrorKind::Additive | ErrorKind::Proportional => 1,
            ErrorKind::Combined => 2,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ErrorKind::Additive => &["a"],
            ErrorKind::Proportional => &["b"],
            ErrorKind::Combined => &["a", "b"],
        }
    }
}

impl std::str::FromStr for ErrorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(ErrorKind::Additive),
            "proportional" => Ok(ErrorKind::Proportional),
            "combined" => Ok(ErrorKind::Combined),
            other => Err(Error::input(format!("unknown error model `{other}`"))),
        }
    }
}

/// Residual standard deviation `a + b·C`, on the standard-deviation scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorModelSpec {
    pub kind: ErrorKind,
    pub a: f64,
    pub b: f64,
}

pub const ERROR_SD_FLOOR: f64 = 1e-10;

impl ErrorModelSpec {
    pub fn additive(a: f64) -> Self {
        Self {
            kind: ErrorKind::Additive,
            a,
            b: 0.0,
        }
    }

    pub fn proportional(b: f64) -> Self {
        Self {
            kind: ErrorKind::Proportional,
            a: 0.0,
            b,
        }
    }

    pub fn combined(a: f64, b: f64) -> Self {
        Self {
            kind: ErrorKind::Combined,
            a,
            b,
        }
    }

    /// Build from the free parameters in [`ErrorKind::param_names`] order.
    pub fn from_params(kind: ErrorKind, p: &[f64]) -> Self {
        match kind {
            ErrorKind::Additive => Self::additive(p[0]),
            ErrorKind::Proportional => Self::proportional(p[0]),
            ErrorKind::Combined => Self::combined(p[0], p[1]),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self.kind {
            ErrorKind::Additive => vec![self.a],
            ErrorKind::Proportional => vec![self.b],
            ErrorKind::Combined => vec![self.a, self.b],
        }
    }

    /// Standard deviation at prediction `c` and its derivative in `c`.
    #[inline]
    pub fn sd_with_derivative(&self, c: f64) -> (f64, f64) {
        let (sd, dsd) = match self.kind {
            ErrorKind::Additive => (self.a, 0.0),
            ErrorKind::Proportional => (self.b * c.abs(), self.b * c.signum()),
            ErrorKind::Combined => (self.a + self.b * c, self.b),
        };
        if sd > ERROR_SD_FLOOR {
            (sd, dsd)
        } else {
            (ERROR_SD_FLOOR, 0.0)
        }
    }
}

pub fn error_sd(spec: &ErrorModelSpec, c: f64) -> f64 {
    spec.sd_with_derivative(c).0
}
