//! Python bindings. Results cross the boundary as plain dicts and lists built
//! from each report's serde representation, so field names match the CLI's
//! JSON output.

use std::collections::HashMap;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use rd_toolkit::bandwidth::select_mse_bandwidth;
use rd_toolkit::continuity::{rbc_inference, EstimandKind, EstimatorConfig};
use rd_toolkit::locrand::{
    diff_in_means, fisher_pvalue as fisher_rd, neyman_ci, select_window as select_window_rd, AssignmentModel,
    FisherConfig, Framework, Window,
};
use rd_toolkit::lpoly::KernelKind;
use rd_toolkit::rdplot::{build_rdplot, Binning, PlotOptions};
use rd_toolkit::sample::{ColumnMap, RdSample};
use rd_toolkit::sim::{self, presets, CoverageConfig, IntervalMethod};
use rd_toolkit::validation::{run_validation, ContinuityConfig, ValidationConfig};
use rd_toolkit::RdError;

create_exception!(rd_toolkit_py, RdToolkitError, PyValueError, "Error raised by the rd-toolkit core.");

fn to_py_err(e: RdError) -> PyErr {
    RdToolkitError::new_err(format!("{}: {e}", e.code()))
}

fn parse<T: std::str::FromStr<Err = RdError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py_err)
}

fn parse_kernel(name: &str) -> PyResult<KernelKind> {
    KernelKind::ALL
        .into_iter()
        .find(|k| k.name() == name.to_ascii_lowercase())
        .ok_or_else(|| RdToolkitError::new_err(format!("InvalidArgument: unknown kernel `{name}`")))
}

fn parse_model(bernoulli: Option<f64>) -> AssignmentModel {
    match bernoulli {
        Some(prob) => AssignmentModel::Bernoulli { prob },
        None => AssignmentModel::FixedMargins,
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

/// Converts any serializable report into nested Python dicts and lists.
pub fn report_to_py<'py, T: Serialize>(py: Python<'py>, report: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(report).map_err(|e| RdToolkitError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

/// Running variable, outcome and optional treatment, covariates and
/// per-unit cutoffs.
#[pyclass(name = "Sample", module = "rd_toolkit_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PySample {
    pub inner: RdSample,
}

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (score, outcome, cutoff = 0.0, treatment = None, covariates = None, unit_cutoffs = None))]
    fn new(
        score: Vec<f64>,
        outcome: Vec<f64>,
        cutoff: f64,
        treatment: Option<Vec<f64>>,
        covariates: Option<HashMap<String, Vec<f64>>>,
        unit_cutoffs: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let mut s = RdSample::new(score, outcome, cutoff).map_err(to_py_err)?;
        if let Some(d) = treatment {
            s = s.with_received(d).map_err(to_py_err)?;
        }
        if let Some(covs) = covariates {
            let mut names: Vec<_> = covs.into_iter().collect();
            names.sort_by(|a, b| a.0.cmp(&b.0));
            for (name, values) in names {
                s = s.with_covariate(name, values).map_err(to_py_err)?;
            }
        }
        if let Some(c) = unit_cutoffs {
            s = s.with_unit_cutoffs(c).map_err(to_py_err)?;
        }
        Ok(Self { inner: s })
    }

    #[staticmethod]
    #[pyo3(signature = (path, score, outcome, cutoff = 0.0, treatment = None, covariates = Vec::new(), cutoff_column = None, delimiter = ','))]
    #[allow(clippy::too_many_arguments)]
    fn from_csv(
        path: &str,
        score: &str,
        outcome: &str,
        cutoff: f64,
        treatment: Option<String>,
        covariates: Vec<String>,
        cutoff_column: Option<String>,
        delimiter: char,
    ) -> PyResult<Self> {
        let columns = ColumnMap {
            treatment,
            covariates,
            cutoff_column,
            ..ColumnMap::new(score, outcome)
        };
        let delimiter = u8::try_from(delimiter)
            .map_err(|_| RdToolkitError::new_err("InvalidArgument: delimiter must be ASCII"))?;
        RdSample::from_csv(path, &columns, cutoff, delimiter).map(|inner| Self { inner }).map_err(to_py_err)
    }

    /// Draws a sample from a named benchmark design.
    #[staticmethod]
    #[pyo3(signature = (dgp, n, seed = 0))]
    fn simulate(dgp: &str, n: usize, seed: u64) -> PyResult<Self> {
        let spec = presets::by_name(dgp)
            .ok_or_else(|| RdToolkitError::new_err(format!("BadSpec: unknown design `{dgp}`")))?;
        sim::simulate_sample(&spec, n, seed).map(|inner| Self { inner }).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Sample(n={}, cutoff={})", self.inner.len(), self.inner.cutoff())
    }

    #[getter]
    fn score(&self) -> Vec<f64> {
        self.inner.score().to_vec()
    }

    #[getter]
    fn outcome(&self) -> Vec<f64> {
        self.inner.outcome().to_vec()
    }

    #[getter]
    fn treatment(&self) -> Option<Vec<f64>> {
        self.inner.received().map(<[f64]>::to_vec)
    }

    #[getter]
    fn cutoff(&self) -> f64 {
        self.inner.cutoff()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names().map(str::to_string).collect()
    }

    fn covariate(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner
            .covariate(name)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| to_py_err(RdError::MissingCovariate(name.to_string())))
    }
}

/// Local polynomial estimate with conventional and robust bias-corrected
/// inference. Without `h` the MSE-optimal bandwidth is selected.
#[pyfunction]
#[pyo3(signature = (sample, kind = "sharp", p = 1, kernel = "triangular", h = None, level = 0.95))]
fn estimate<'py>(
    py: Python<'py>,
    sample: &PySample,
    kind: &str,
    p: usize,
    kernel: &str,
    h: Option<f64>,
    level: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: EstimandKind = parse(kind)?;
    let kernel = parse_kernel(kernel)?;
    let (h, bandwidth) = match h {
        Some(h) => (h, None),
        None => {
            let sel = select_mse_bandwidth(&sample.inner, p, kernel).map_err(to_py_err)?;
            (sel.h_mse, Some(sel))
        }
    };
    let cfg = EstimatorConfig::new(p, kernel, h).with_level(level);
    let rbc = py.detach(|| rbc_inference(&sample.inner, kind, &cfg)).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("estimate", report_to_py(py, &rbc.base)?)?;
    out.set_item("rbc", report_to_py(py, &rbc)?)?;
    out.set_item("bandwidth", report_to_py(py, &bandwidth)?)?;
    out.set_item("config", report_to_py(py, &cfg)?)?;
    Ok(out.into_any())
}

#[pyfunction]
#[pyo3(signature = (sample, p = 1, kernel = "triangular"))]
fn select_bandwidth<'py>(py: Python<'py>, sample: &PySample, p: usize, kernel: &str) -> PyResult<Bound<'py, PyAny>> {
    let sel = select_mse_bandwidth(&sample.inner, p, parse_kernel(kernel)?).map_err(to_py_err)?;
    report_to_py(py, &sel)
}

fn window_for(sample: &RdSample, window: f64, w_right: Option<f64>) -> PyResult<Window> {
    Window::new(sample, window, w_right.unwrap_or(window)).map_err(to_py_err)
}

/// Difference in means inside `[c - window, c + w_right)` with Neyman or
/// super-population intervals and a Fisher p-value.
#[pyfunction]
#[pyo3(signature = (sample, window, w_right = None, framework = "neyman", bernoulli = None, alpha = 0.05, draws = 9999, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn locrand<'py>(
    py: Python<'py>,
    sample: &PySample,
    window: f64,
    w_right: Option<f64>,
    framework: &str,
    bernoulli: Option<f64>,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let framework: Framework = parse(framework)?;
    let model = parse_model(bernoulli);
    let win = window_for(&sample.inner, window, w_right)?;
    let est = diff_in_means(&sample.inner, &win, &model, framework).map_err(to_py_err)?;
    let cfg = FisherConfig { draws, seed, ..FisherConfig::default() };
    let fisher = py.detach(|| fisher_rd(&sample.inner, &win, &model, &cfg)).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("estimate", report_to_py(py, &est)?)?;
    out.set_item("fisher", report_to_py(py, &fisher)?)?;
    if framework != Framework::Fisher {
        let ney = neyman_ci(&sample.inner, &win, framework, alpha).map_err(to_py_err)?;
        out.set_item("neyman", report_to_py(py, &ney)?)?;
    }
    Ok(out.into_any())
}

#[pyfunction]
#[pyo3(signature = (sample, window, w_right = None, bernoulli = None, draws = 9999, seed = 0))]
fn fisher_pvalue<'py>(
    py: Python<'py>,
    sample: &PySample,
    window: f64,
    w_right: Option<f64>,
    bernoulli: Option<f64>,
    draws: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let win = window_for(&sample.inner, window, w_right)?;
    let cfg = FisherConfig { draws, seed, ..FisherConfig::default() };
    let model = parse_model(bernoulli);
    let r = py.detach(|| fisher_rd(&sample.inner, &win, &model, &cfg)).map_err(to_py_err)?;
    report_to_py(py, &r)
}

/// Largest candidate half-width whose nested windows all pass covariate
/// balance at `alpha`.
#[pyfunction]
#[pyo3(signature = (sample, covariates, candidates, alpha = 0.15, draws = 9999, seed = 0))]
fn select_window<'py>(
    py: Python<'py>,
    sample: &PySample,
    covariates: Vec<String>,
    candidates: Vec<f64>,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = FisherConfig { draws, seed, ..FisherConfig::default() };
    let sel = py
        .detach(|| select_window_rd(&sample.inner, &covariates, &candidates, alpha, &cfg))
        .map_err(to_py_err)?;
    report_to_py(py, &sel)
}

/// Full falsification battery: balance, density, binomial, placebo cutoffs,
/// donut holes and bandwidth sensitivity.
#[pyfunction]
#[pyo3(signature = (sample, covariates = Vec::new(), window = None, kind = "sharp", p = 1, kernel = "triangular", h = None, donut_radii = Vec::new(), placebo = None, draws = 9999, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn validate<'py>(
    py: Python<'py>,
    sample: &PySample,
    covariates: Vec<String>,
    window: Option<f64>,
    kind: &str,
    p: usize,
    kernel: &str,
    h: Option<f64>,
    donut_radii: Vec<f64>,
    placebo: Option<Vec<f64>>,
    draws: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let config = ValidationConfig {
        kind: parse(kind)?,
        continuity: ContinuityConfig { p, kernel: parse_kernel(kernel)?, h, ..ContinuityConfig::default() },
        covariates,
        window,
        fisher: FisherConfig { draws, seed, ..FisherConfig::default() },
        placebo_grid: placebo,
        donut_radii,
        ..ValidationConfig::default()
    };
    let report = py.detach(|| run_validation(&sample.inner, &config)).map_err(to_py_err)?;
    report_to_py(py, &report)
}

/// Binned means and global polynomial fits on each side. With `svg = True`
/// the rendered figure is returned under the `svg` key.
#[pyfunction]
#[pyo3(signature = (sample, bins = None, binning = "even", poly_order = 4, svg = false))]
fn rdplot<'py>(
    py: Python<'py>,
    sample: &PySample,
    bins: Option<(usize, usize)>,
    binning: &str,
    poly_order: usize,
    svg: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let options = PlotOptions { binning: parse::<Binning>(binning)?, bins, poly_order, ..PlotOptions::default() };
    let plot = build_rdplot(&sample.inner, &options).map_err(to_py_err)?;
    let out = report_to_py(py, &plot)?;
    if svg {
        out.set_item("svg", plot.to_svg())?;
    }
    Ok(out)
}

/// Two-sided normal-test power at effect `tau`.
#[pyfunction]
#[pyo3(signature = (tau, se, alpha = 0.05))]
fn power(tau: f64, se: f64, alpha: f64) -> f64 {
    sim::power(tau, se, alpha)
}

/// Minimum detectable effect: the effect at which power equals `target`.
#[pyfunction]
#[pyo3(signature = (se, alpha = 0.05, target = 0.8))]
fn mde(se: f64, alpha: f64, target: f64) -> PyResult<f64> {
    sim::mde(se, alpha, target).map_err(to_py_err)
}

/// Monte Carlo coverage of conventional or robust intervals on a named
/// benchmark design.
#[pyfunction]
#[pyo3(signature = (dgp, n, replications = 500, seed = 0, method = "rbc", p = 1, kernel = "triangular"))]
#[allow(clippy::too_many_arguments)]
fn simulate_coverage<'py>(
    py: Python<'py>,
    dgp: &str,
    n: usize,
    replications: usize,
    seed: u64,
    method: &str,
    p: usize,
    kernel: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = presets::by_name(dgp).ok_or_else(|| RdToolkitError::new_err(format!("BadSpec: unknown design `{dgp}`")))?;
    let method = match method.to_ascii_lowercase().as_str() {
        "rbc" => IntervalMethod::Rbc,
        "conventional" => IntervalMethod::Conventional,
        other => return Err(RdToolkitError::new_err(format!("InvalidArgument: unknown method `{other}`"))),
    };
    let cfg = CoverageConfig { method, p, kernel: parse_kernel(kernel)?, ..CoverageConfig::default() };
    let summary = py
        .detach(|| sim::simulate_coverage(&spec, &cfg, n, replications, seed))
        .map_err(to_py_err)?;
    report_to_py(py, &summary)
}

#[pymodule]
pub fn rd_toolkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RdToolkitError", m.py().get_type::<RdToolkitError>())?;
    m.add_class::<PySample>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(select_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(locrand, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_pvalue, m)?)?;
    m.add_function(wrap_pyfunction!(select_window, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(rdplot, m)?)?;
    m.add_function(wrap_pyfunction!(power, m)?)?;
    m.add_function(wrap_pyfunction!(mde, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_coverage, m)?)?;
    Ok(())
}
