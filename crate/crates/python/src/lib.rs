use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nlmesel_core as core;
use nlmesel_core::doc::{ModelDoc, SearchDoc, StudyDoc, ThetaDoc};
use nlmesel_core::selection::{enumerate_cov_structures, CovMode};
use nlmesel_core::sim::{mc_selection_study, simulate_dataset, SimDesign};
use nlmesel_core::{CriterionKind, FitOptions, ModelRegistry};

fn to_py(e: core::Error) -> PyErr {
    use core::Error as E;
    match e {
        E::NonFiniteObjective
        | E::MaxIterations { .. }
        | E::InnerNonConvergence { .. }
        | E::NonFiniteLikelihood { .. }
        | E::DegenerateEigenvalues { .. }
        | E::NonPositiveVariance(_)
        | E::Domain { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn kind(name: &str) -> PyResult<CriterionKind> {
    name.parse().map_err(to_py)
}

/// Model definition: structural model, transforms, covariates,
/// random-effects pattern and error model.
#[pyclass(name = "ModelSpec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModelSpec {
    inner: core::ModelSpec,
    init: Option<core::ThetaVector>,
}

#[pymethods]
impl PyModelSpec {
    /// Parse a TOML model document.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let doc = ModelDoc::from_toml(text).map_err(to_py)?;
        let inner = doc.to_spec(&ModelRegistry::builtin()).map_err(to_py)?;
        let init = doc.init_theta(&inner).map_err(to_py)?;
        Ok(Self { inner, init })
    }

    #[getter]
    fn summary(&self) -> String {
        self.inner.summary()
    }

    #[getter]
    fn parameter_names(&self) -> Vec<String> {
        self.inner.parameter_names()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec('{}')", self.inner.summary())
    }
}

#[pyclass(name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: core::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Read a long-format CSV; regressor columns are those `spec`'s
    /// structural model needs.
    #[staticmethod]
    fn from_csv(path: &str, spec: &PyModelSpec) -> PyResult<Self> {
        let inner = core::Dataset::from_csv_path(path, &spec.inner.structural().regressor_names()).map_err(to_py)?;
        spec.inner.check_dataset(&inner).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path)?;
        self.inner.write_csv(std::io::BufWriter::new(f)).map_err(to_py)
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.n_subjects()
    }

    #[getter]
    fn n_total(&self) -> usize {
        self.inner.n_total()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n_subjects={}, n_total={})", self.inner.n_subjects(), self.inner.n_total())
    }
}

/// Parameter values for a particular spec.
#[pyclass(name = "Theta", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTheta {
    inner: core::ThetaVector,
    spec: core::ModelSpec,
}

#[pymethods]
impl PyTheta {
    #[staticmethod]
    fn from_toml(text: &str, spec: &PyModelSpec) -> PyResult<Self> {
        let inner = ThetaDoc::from_toml(text)
            .and_then(|d| d.to_theta(&spec.inner))
            .map_err(to_py)?;
        Ok(Self {
            inner,
            spec: spec.inner.clone(),
        })
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn error(&self) -> Vec<f64> {
        self.inner.error.clone()
    }

    /// Random-effects covariance over the random parameters.
    fn omega(&self) -> Vec<Vec<f64>> {
        let o = self.inner.omega(&self.spec);
        (0..o.nrows()).map(|r| o.row(r).iter().copied().collect()).collect()
    }
}

#[pyclass(name = "FitResult", frozen)]
struct PyFitResult {
    inner: core::FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn summary(&self) -> String {
        self.inner.summary.clone()
    }

    /// `(name, estimate, se or None)` triples on the reporting scale.
    fn estimates(&self) -> Vec<(String, f64, Option<f64>)> {
        self.inner
            .estimates
            .iter()
            .map(|e| (e.name.clone(), e.estimate, e.se))
            .collect()
    }

    fn criterion(&self, kind_name: &str) -> PyResult<f64> {
        Ok(core::criterion(&self.inner, kind(kind_name)?).map_err(to_py)?.value)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("fit results serialize")
    }

    fn __repr__(&self) -> String {
        format!("FitResult('{}', loglik={:.6})", self.inner.summary, self.inner.loglik)
    }
}

/// Maximum-likelihood fit; `nodes = 1` is the Laplace approximation.
#[pyfunction]
#[pyo3(signature = (dataset, spec, nodes = 1, seed = 0, compute_se = true))]
fn fit(
    py: Python<'_>,
    dataset: &PyDataset,
    spec: &PyModelSpec,
    nodes: usize,
    seed: u64,
    compute_se: bool,
) -> PyResult<PyFitResult> {
    let opts = FitOptions {
        nodes,
        seed,
        compute_se,
        init: spec.init.clone(),
        ..FitOptions::default()
    };
    let inner = py
        .detach(|| core::fit_ml(&dataset.inner, &spec.inner, &opts))
        .map_err(to_py)?;
    Ok(PyFitResult { inner })
}

#[pyfunction]
#[pyo3(signature = (dataset, theta, nodes = 1))]
fn marginal_loglik(py: Python<'_>, dataset: &PyDataset, theta: &PyTheta, nodes: usize) -> PyResult<f64> {
    py.detach(|| core::marginal_loglik_agq(&dataset.inner, &theta.inner, &theta.spec, nodes))
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (theta, n_subjects, times, seed = 0, dose = 100.0, infusion = 0.5))]
fn simulate(
    theta: &PyTheta,
    n_subjects: usize,
    times: Vec<f64>,
    seed: u64,
    dose: f64,
    infusion: f64,
) -> PyResult<PyDataset> {
    let design = SimDesign {
        dose,
        infusion,
        ..SimDesign::new(n_subjects, times, seed)
    };
    let inner = simulate_dataset(&theta.spec, &theta.inner, &design).map_err(to_py)?;
    Ok(PyDataset { inner })
}

/// Stepwise selection from a TOML search configuration. Returns
/// `(final summary, criterion value, trace CSV, final fit)`.
#[pyfunction]
#[pyo3(signature = (dataset, config, criterion = None))]
fn stepwise_select(
    py: Python<'_>,
    dataset: &PyDataset,
    config: &str,
    criterion: Option<&str>,
) -> PyResult<(String, f64, String, PyFitResult)> {
    let doc = SearchDoc::from_toml(config).map_err(to_py)?;
    let (spec, opts) = doc.build(&ModelRegistry::builtin(), None).map_err(to_py)?;
    let k = match criterion {
        Some(c) => kind(c)?,
        None => doc.criterion().map_err(to_py)?,
    };
    let trace = py
        .detach(|| core::selection::stepwise_select(&dataset.inner, &spec, &doc.pool, k, &opts))
        .map_err(to_py)?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv).map_err(to_py)?;
    Ok((
        trace.final_summary.clone(),
        trace.final_value,
        String::from_utf8(csv).expect("trace CSV is UTF-8"),
        PyFitResult {
            inner: trace.final_fit,
        },
    ))
}

/// Monte Carlo selection study from a TOML configuration. Returns
/// `([(candidate, count, frequency)], failed)`.
#[pyfunction]
#[pyo3(signature = (config, replicates = None))]
fn mc_study(py: Python<'_>, config: &str, replicates: Option<usize>) -> PyResult<(Vec<(String, usize, f64)>, usize)> {
    let mut cfg = StudyDoc::from_toml(config)
        .and_then(|d| d.to_config(&ModelRegistry::builtin()))
        .map_err(to_py)?;
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    let result = py.detach(|| mc_selection_study(&cfg)).map_err(to_py)?;
    Ok((
        result
            .frequencies
            .iter()
            .map(|f| (f.candidate.clone(), f.selected_count, f.frequency))
            .collect(),
        result.failed,
    ))
}

/// Summaries of the covariance structures searched for `names`;
/// `mode` is `diagonal` or `full`.
#[pyfunction]
fn covariance_structures(names: Vec<String>, mode: &str) -> PyResult<Vec<String>> {
    let mode = match mode {
        "diagonal" => CovMode::DiagonalOnly,
        "full" => CovMode::Full,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    Ok(enumerate_cov_structures(names.len(), &mode)
        .map_err(to_py)?
        .iter()
        .map(|p| core::model::pattern_summary(&names, p))
        .collect())
}

#[pyfunction]
fn criterion_names() -> Vec<&'static str> {
    CriterionKind::ALL.iter().map(|k| k.as_str()).collect()
}

#[pymodule]
fn nlmesel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTheta>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(stepwise_select, m)?)?;
    m.add_function(wrap_pyfunction!(mc_study, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_structures, m)?)?;
    m.add_function(wrap_pyfunction!(criterion_names, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
