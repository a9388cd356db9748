use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fmm::cli::ModelArchive;
use fmm::design::{load_dataset, save_dataset, LongitudinalDataset, MixedEffectTarget};
use fmm::error::FmmError;
use fmm::predict::{PredictionResult, Predictor};
use fmm::simulate::{generate, run_study, Case, RunOptions, SimulationConfig};
use fmm::smoothing::{EtaRule, LambdaRule, SmoothingMode};
use fmm::solver::{BasisConfig, FitConfig, FittedModel};
use fmm::splines;

fn py_err(e: FmmError) -> PyErr {
    match e {
        FmmError::NotConverged { .. }
        | FmmError::Numerical(_)
        | FmmError::SingularJacobian
        | FmmError::RankDeficient { .. }
        | FmmError::IllConditioned(_)
        | FmmError::RootNotBracketed { .. }
        | FmmError::DegenerateSmoothing(_)
        | FmmError::ReplicateFailures { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Clamped B-spline basis on [0, 1] with equally spaced interior knots.
#[pyclass(name = "SplineBasis", frozen)]
struct PySplineBasis {
    inner: splines::SplineBasis,
}

#[pymethods]
impl PySplineBasis {
    #[new]
    fn new(order: usize, interior_knots: usize) -> PyResult<Self> {
        Ok(Self {
            inner: splines::SplineBasis::new(order, interior_knots).map_err(py_err)?,
        })
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn knots(&self) -> Vec<f64> {
        self.inner.knots().to_vec()
    }

    fn eval(&self, t: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.eval(t).map_err(py_err)?.iter().copied().collect())
    }

    fn eval_d2(&self, t: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.eval_d2(t).map_err(py_err)?.iter().copied().collect())
    }

    /// Roughness penalty ∫B''B''ᵀ as a list of rows.
    fn penalty(&self) -> Vec<Vec<f64>> {
        let m = self.inner.penalty().matrix;
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "SplineBasis(order={}, interior_knots={})",
            self.inner.order(),
            self.inner.interior_knot_count()
        )
    }
}

/// Longitudinal data grouped by subject.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: LongitudinalDataset,
}

#[pymethods]
impl PyDataset {
    /// Reads a CSV with columns subject, t, y, x1.., z1...
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(path, None).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&self.inner, path).map_err(py_err)
    }

    /// One replicate of a simulation case; returns the data and the true
    /// subject-mean targets at the study's target time.
    #[staticmethod]
    #[pyo3(signature = (case="I", n=50, m=1, seed=7, replicate=0, t0=None))]
    fn simulate(case: &str, n: usize, m: usize, seed: u64, replicate: usize, t0: Option<f64>) -> PyResult<(Self, f64, Vec<f64>)> {
        let config = SimulationConfig {
            case: case.parse::<Case>().map_err(py_err)?,
            n,
            m,
            master_seed: seed,
            t0,
            ..Default::default()
        };
        let (data, truth) = generate(&config, replicate).map_err(py_err)?;
        Ok((Self { inner: data }, truth.t0, truth.a))
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn subject_ids(&self) -> Vec<String> {
        self.inner.subjects().iter().map(|s| s.id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }
}

/// A fitted model bound to the data it was fitted to.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: FittedModel,
    data: LongitudinalDataset,
    predictor: Predictor,
}

impl PyModel {
    fn build(model: FittedModel, data: LongitudinalDataset) -> PyResult<Self> {
        let design = model.design(&data).map_err(py_err)?;
        let predictor = Predictor::new(&model, &design).map_err(py_err)?;
        Ok(Self { model, data, predictor })
    }
}

fn result_dict<'py>(py: Python<'py>, r: &PredictionResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("t0", r.target.t0)?;
    d.set_item("a_naive", r.a_naive)?;
    d.set_item("a_corrected", r.a_corrected)?;
    d.set_item("bias_estimate", r.bias_estimate)?;
    d.set_item("mse_first_order", r.mse_first_order)?;
    d.set_item("mse_plugin", r.mse_plugin)?;
    d.set_item("lower", r.interval.0)?;
    d.set_item("upper", r.interval.1)?;
    Ok(d)
}

#[pymethods]
impl PyModel {
    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.model.theta.iter().copied().collect()
    }

    #[getter]
    fn alpha(&self) -> Vec<Vec<f64>> {
        self.model.alpha.iter().map(|a| a.iter().copied().collect()).collect()
    }

    #[getter]
    fn sigma_e2(&self) -> f64 {
        self.model.variance.sigma_e2
    }

    #[getter]
    fn omega(&self) -> Vec<Vec<f64>> {
        let o = &self.model.variance.omega;
        o.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    #[getter]
    fn smoothing_lambda(&self) -> Vec<f64> {
        self.model.smoothing.lambda.clone()
    }

    #[getter]
    fn smoothing_eta(&self) -> Vec<f64> {
        self.model.smoothing.eta.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.model.diagnostics.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.model.diagnostics.converged
    }

    /// JSON archive, the same format `fmm fit` writes.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&ModelArchive::new(&self.model, &self.data))
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str, data: &PyDataset) -> PyResult<Self> {
        let archive: ModelArchive = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        archive.check_data(&data.inner).map_err(py_err)?;
        Self::build(archive.model().map_err(py_err)?, data.inner.clone())
    }

    /// Subject-mean targets X̄_i β(t0) + Z̄_i ν_i(t0) for every subject.
    fn predict_subject_means<'py>(&self, py: Python<'py>, t0: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        (0..self.data.n())
            .map(|i| {
                let target = MixedEffectTarget::subject_mean(&self.data, i, t0);
                let r = self.predictor.predict(&target).map_err(py_err)?;
                result_dict(py, &r)
            })
            .collect()
    }

    /// A general target l0ᵀβ(t0) + Σ_i d0[i]ᵀν_i(t0); `d0` maps subject index to weights.
    #[pyo3(signature = (l0, t0, d0=None))]
    fn predict<'py>(&self, py: Python<'py>, l0: Vec<f64>, t0: f64, d0: Option<BTreeMap<usize, Vec<f64>>>) -> PyResult<Bound<'py, PyDict>> {
        let target = MixedEffectTarget {
            l0,
            d0: d0.unwrap_or_default(),
            t0,
        };
        let r = self.predictor.predict(&target).map_err(py_err)?;
        result_dict(py, &r)
    }
}

fn smoothing_mode(smoothing: &str, lambda: Option<Vec<f64>>, eta: Option<Vec<f64>>, p: usize, q: usize) -> PyResult<SmoothingMode> {
    let expand = |v: Vec<f64>, k: usize| if v.len() == 1 { vec![v[0]; k] } else { v };
    match (smoothing, lambda, eta) {
        ("select", None, None) => Ok(SmoothingMode::default()),
        ("unit", None, None) => Ok(fmm::simulate::simulation_smoothing()),
        ("fixed", Some(l), Some(e)) => Ok(SmoothingMode {
            lambda: LambdaRule::Fixed(expand(l, p)),
            eta: EtaRule::Fixed(expand(e, q)),
        }),
        ("fixed", _, _) => Err(PyValueError::new_err("smoothing='fixed' needs both lambda and eta")),
        ("select" | "unit", _, _) => Err(PyValueError::new_err("lambda/eta are only used with smoothing='fixed'")),
        (other, _, _) => Err(PyValueError::new_err(format!(
            "unknown smoothing {other:?}; use 'select', 'fixed' or 'unit'"
        ))),
    }
}

/// Fits the model with both bases of the given order and interior knot count.
#[pyfunction]
#[pyo3(signature = (data, order=4, knots=5, smoothing="select", lambda_=None, eta=None))]
fn fit(
    data: &PyDataset,
    order: usize,
    knots: usize,
    smoothing: &str,
    lambda_: Option<Vec<f64>>,
    eta: Option<Vec<f64>>,
) -> PyResult<PyModel> {
    let config = FitConfig {
        basis: BasisConfig::uniform(order, knots),
        smoothing: smoothing_mode(smoothing, lambda_, eta, data.inner.p(), data.inner.q())?,
        ..FitConfig::default()
    };
    let model = fmm::solver::fit(&data.inner, &config).map_err(py_err)?;
    PyModel::build(model, data.inner.clone())
}

/// Runs a Monte Carlo study and returns its summary.
#[pyfunction]
#[pyo3(signature = (case="I", n=50, m=1, replicates=600, seed=7, jobs=0, t0=None))]
fn simulate<'py>(
    py: Python<'py>,
    case: &str,
    n: usize,
    m: usize,
    replicates: usize,
    seed: u64,
    jobs: usize,
    t0: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let config = SimulationConfig {
        case: case.parse::<Case>().map_err(py_err)?,
        n,
        m,
        replicates,
        master_seed: seed,
        t0,
        ..Default::default()
    };
    let options = RunOptions {
        jobs,
        infinite_intervals: false,
    };
    let report = py.detach(|| run_study(&config, &options)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("case", report.case.to_string())?;
    d.set_item("n", report.n)?;
    d.set_item("t0", report.t0)?;
    d.set_item("replicates", report.replicates)?;
    d.set_item("failed", report.failures.len())?;
    d.set_item("coverage", report.coverage)?;
    d.set_item("relative_bias", report.relative_bias)?;
    d.set_item("sigma_hat", report.sigma_hat)?;
    d.set_item("true_mse", report.true_mse_mean)?;
    d.set_item("min_plugin_gap", report.min_plugin_gap)?;
    d.set_item("config_sha256", config.hash())?;
    Ok(d)
}

#[pymodule]
fn pyfmm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySplineBasis>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
