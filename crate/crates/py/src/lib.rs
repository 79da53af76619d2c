//! Python bindings for `htreg`, importable as the `htreg` module.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use htreg::data::{load_checkpoint, save_checkpoint, DataError};
use htreg::harness::{
    analysis_csv, analyze_model, run_experiment, run_gradcheck, weighted_alpha_total, ConfigError,
    ExperimentConfig, ExperimentError,
};
use htreg::penalty::spectrum_alpha;
use htreg::{
    gram_spectrum, hill_estimator, init_mlp, penalty_gradient, penalty_value, positive_spectrum,
    sample_frechet, sample_pareto, schedule_factor, Dataset, HillK, MlpModel, PenaltyKind,
    PenaltySpec, Schedule, Spectrum, TrainError, WeightMatrix,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn data_err(e: DataError) -> PyErr {
    match e {
        DataError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::NonFiniteUpdate { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn experiment_err(e: ExperimentError) -> PyErr {
    match e {
        ExperimentError::Config(ConfigError::Io { .. }) | ExperimentError::Io { .. } => {
            PyOSError::new_err(e.to_string())
        }
        ExperimentError::Data(d) => data_err(d),
        ExperimentError::Train(TrainError::NonFiniteUpdate { .. }) => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn hill_k(k: Option<usize>) -> HillK {
    k.map_or(HillK::Auto, HillK::Fixed)
}

/// Serializes through Python's `json` so plain dicts cross the boundary.
fn to_json(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn from_json<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> PyResult<WeightMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(value_err(format!("row {i} has {} entries, expected {cols}", rows[i].len())));
    }
    WeightMatrix::from_row_major(rows.len(), cols, &rows.concat()).map_err(value_err)
}

fn matrix_to_rows(w: &WeightMatrix) -> Vec<Vec<f64>> {
    let (r, c) = w.shape();
    (0..r).map(|i| (0..c).map(|j| w.get(i, j)).collect()).collect()
}

/// Dense real matrix `W`, built from a list of rows.
#[pyclass(name = "WeightMatrix", module = "htreg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyWeightMatrix {
    inner: WeightMatrix,
}

#[pymethods]
impl PyWeightMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PyWeightMatrix {
            inner: matrix_from_rows(&rows)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner)
    }

    fn frobenius_sq(&self) -> f64 {
        self.inner.frobenius_sq()
    }

    fn stable_rank(&self) -> PyResult<f64> {
        htreg::stable_rank(&self.inner).map_err(value_err)
    }

    fn spectrum(&self) -> PyResult<PySpectrum> {
        Ok(PySpectrum {
            inner: gram_spectrum(&self.inner).map_err(value_err)?,
        })
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.inner.shape();
        format!("WeightMatrix({r}x{c})")
    }
}

/// Eigenvalues of `WᵀW`, descending, with their right singular vectors.
#[pyclass(name = "Spectrum", module = "htreg", frozen)]
pub struct PySpectrum {
    inner: Spectrum,
}

#[pymethods]
impl PySpectrum {
    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues.clone()
    }

    #[getter]
    fn lambda_max(&self) -> f64 {
        self.inner.lambda_max
    }

    #[getter]
    fn frobenius_sq(&self) -> f64 {
        self.inner.frobenius_sq
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn stable_rank(&self) -> PyResult<f64> {
        self.inner.stable_rank().map_err(value_err)
    }

    #[pyo3(signature = (rel_tol = htreg::spectral::DEFAULT_POSITIVE_TOL))]
    fn positive(&self, rel_tol: f64) -> Vec<f64> {
        positive_spectrum(&self.inner, rel_tol)
    }

    /// Hill tail index of the positive eigenvalues.
    #[pyo3(signature = (k = None))]
    fn alpha_hat(&self, k: Option<usize>) -> PyResult<f64> {
        spectrum_alpha(&self.inner, hill_k(k)).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Spectrum(n={}, lambda_max={:e})", self.inner.len(), self.inner.lambda_max)
    }
}

/// Returns `(alpha_hat, k, n)`; `k=None` picks the default order statistic.
#[pyfunction]
#[pyo3(name = "hill_estimator", signature = (samples, k = None))]
fn py_hill_estimator(samples: Vec<f64>, k: Option<usize>) -> PyResult<(f64, usize, usize)> {
    let est = hill_estimator(&samples, hill_k(k)).map_err(value_err)?;
    Ok((est.alpha_hat, est.k, est.n))
}

#[pyfunction]
#[pyo3(name = "sample_pareto")]
fn py_sample_pareto(alpha: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    sample_pareto(alpha, n, seed).map_err(value_err)
}

#[pyfunction]
#[pyo3(name = "sample_frechet")]
fn py_sample_frechet(alpha: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    sample_frechet(alpha, n, seed).map_err(value_err)
}

/// Penalty kind, coefficient and schedule; `schedule` is a dict such as
/// `{"type": "power_decay", "k": 2}`.
#[pyclass(name = "Penalty", module = "htreg", frozen)]
pub struct PyPenalty {
    inner: PenaltySpec,
}

#[pymethods]
impl PyPenalty {
    #[new]
    #[pyo3(signature = (kind, coefficient, schedule = None, k_fraction = 0.5, hill_k = None))]
    fn new(
        kind: &str,
        coefficient: f64,
        schedule: Option<&Bound<'_, PyAny>>,
        k_fraction: f64,
        hill_k: Option<usize>,
    ) -> PyResult<Self> {
        let kind: PenaltyKind = kind.parse().map_err(value_err)?;
        let schedule = match schedule {
            Some(s) => serde_json::from_value::<Schedule>(to_json(s)?).map_err(value_err)?,
            None => Schedule::Always,
        };
        let spec = PenaltySpec {
            kind,
            coefficient,
            schedule,
            k_fraction,
            hill_k: self::hill_k(hill_k),
        };
        let errs = spec.validate();
        if !errs.is_empty() {
            let msg: Vec<String> = errs.iter().map(|(f, m)| format!("{f}: {m}")).collect();
            return Err(value_err(msg.join("; ")));
        }
        Ok(PyPenalty { inner: spec })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.name()
    }

    #[getter]
    fn coefficient(&self) -> f64 {
        self.inner.coefficient
    }

    #[getter]
    fn schedule<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        from_json(py, &serde_json::to_value(self.inner.schedule).map_err(value_err)?)
    }

    /// Penalty value for one layer, without the coefficient.
    fn value(&self, w: PyRef<'_, PyWeightMatrix>) -> PyResult<f64> {
        let s = gram_spectrum(&w.inner).map_err(value_err)?;
        penalty_value(&w.inner, &s, &self.inner).map_err(value_err)
    }

    /// Gradient of `value` with the tail index held fixed.
    fn gradient(&self, w: PyRef<'_, PyWeightMatrix>) -> PyResult<PyWeightMatrix> {
        let s = gram_spectrum(&w.inner).map_err(value_err)?;
        Ok(PyWeightMatrix {
            inner: penalty_gradient(&w.inner, &s, &self.inner).map_err(value_err)?,
        })
    }

    /// Schedule multiplier at a 1-indexed epoch.
    fn schedule_factor(&self, epoch: usize) -> f64 {
        schedule_factor(&self.inner.schedule, epoch)
    }

    fn __repr__(&self) -> String {
        format!("Penalty({}, {:e})", self.inner.kind, self.inner.coefficient)
    }
}

/// ReLU multilayer perceptron; `weights[l]` is `fan_in x fan_out`.
#[pyclass(name = "Model", module = "htreg", frozen)]
pub struct PyModel {
    inner: MlpModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn init(layer_sizes: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: init_mlp(&layer_sizes, seed).map_err(train_err)?,
        })
    }

    /// Returns `(model, metadata)`; metadata is `None` without a sidecar file.
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<(Self, Py<PyAny>)> {
        let (model, meta) = load_checkpoint(&path).map_err(data_err)?;
        let meta = match meta {
            Some(m) => from_json(py, &m)?.unbind(),
            None => py.None(),
        };
        Ok((PyModel { inner: model }, meta))
    }

    #[pyo3(signature = (path, metadata = None))]
    fn save(&self, path: PathBuf, metadata: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        let meta = metadata.map(to_json).transpose()?;
        save_checkpoint(&self.inner, meta.as_ref(), &path).map_err(data_err)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<PyWeightMatrix> {
        self.inner
            .weights
            .iter()
            .map(|w| PyWeightMatrix { inner: w.clone() })
            .collect()
    }

    #[getter]
    fn biases(&self) -> Vec<Vec<f64>> {
        self.inner.biases.clone()
    }

    /// Logits for a list of input rows.
    fn logits(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix_from_rows(&rows)?;
        if x.cols() != self.inner.input_dim() {
            return Err(value_err(format!(
                "inputs have {} features, model expects {}",
                x.cols(),
                self.inner.input_dim()
            )));
        }
        Ok(matrix_to_rows(&WeightMatrix::from_matrix(self.inner.logits(x.as_matrix()))))
    }

    /// Returns `(mean cross-entropy, accuracy in percent)`.
    fn evaluate(&self, rows: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, f64)> {
        let x = matrix_from_rows(&rows)?;
        let classes = self.inner.output_dim();
        let data = Dataset::new("python", x.row_major_values(), labels, x.cols().max(1), classes)
            .map_err(data_err)?;
        htreg::evaluate(&self.inner, &data).map_err(train_err)
    }

    /// Per-layer spectral report as a list of dicts.
    fn analyze<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let layers = analyze_model(&self.inner).map_err(value_err)?;
        let out = PyList::empty(py);
        for l in &layers {
            let d = PyDict::new(py);
            d.set_item("layer", l.layer)?;
            d.set_item("rows", l.rows)?;
            d.set_item("cols", l.cols)?;
            d.set_item("lambda_max", l.lambda_max)?;
            d.set_item("frobenius_sq", l.frobenius_sq)?;
            d.set_item("stable_rank", l.stable_rank)?;
            d.set_item("alpha_hat", l.alpha_hat.ok())?;
            d.set_item("weighted_alpha", l.weighted_alpha())?;
            out.append(d)?;
        }
        Ok(out)
    }

    /// `Σ_l alpha_l ln lambda_max,l`, or `None` if some layer has no tail estimate.
    fn weighted_alpha(&self) -> PyResult<Option<f64>> {
        let layers = analyze_model(&self.inner).map_err(value_err)?;
        Ok(weighted_alpha_total(&layers))
    }

    fn analysis_csv(&self) -> PyResult<String> {
        Ok(analysis_csv(&analyze_model(&self.inner).map_err(value_err)?))
    }

    fn __repr__(&self) -> String {
        format!("Model({:?})", self.inner.layer_sizes)
    }
}

/// Returns `(passed, [(check, shape, max_rel_err), ...])`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> (bool, Vec<(String, String, f64)>) {
    let report = run_gradcheck(seed, None);
    let rows = report
        .entries
        .iter()
        .map(|e| (e.check.to_string(), e.shape.to_string(), e.max_rel_err))
        .collect();
    (report.passed(), rows)
}

/// Trains an experiment config (a path or a JSON string) and returns one
/// summary dict per seed.
#[pyfunction]
#[pyo3(signature = (config, jobs = 1))]
fn train_experiment<'py>(py: Python<'py>, config: &str, jobs: usize) -> PyResult<Bound<'py, PyList>> {
    let cfg = if config.trim_start().starts_with('{') {
        ExperimentConfig::from_json(config)
    } else {
        ExperimentConfig::load(config)
    }
    .map_err(|e| experiment_err(e.into()))?;
    let outcome = py
        .detach(|| run_experiment(&cfg, jobs.max(1)))
        .map_err(experiment_err)?;
    let out = PyList::empty(py);
    for (run, paths) in outcome.runs.iter().zip(&outcome.run_paths) {
        let d = PyDict::new(py);
        d.set_item("seed", run.seed)?;
        d.set_item("final_epoch", run.final_epoch)?;
        d.set_item("test_acc", run.test_acc)?;
        d.set_item("test_loss", run.test_loss)?;
        d.set_item("train_acc", run.train_acc)?;
        d.set_item("weighted_alpha_total", run.weighted_alpha_total)?;
        d.set_item("mean_alpha_hat", run.mean_alpha_hat)?;
        d.set_item("metrics_csv", &paths.metrics)?;
        d.set_item("checkpoint", paths.checkpoint.as_ref())?;
        out.append(d)?;
    }
    Ok(out)
}

#[pymodule(name = "htreg")]
fn htreg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWeightMatrix>()?;
    m.add_class::<PySpectrum>()?;
    m.add_class::<PyPenalty>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(py_hill_estimator, m)?)?;
    m.add_function(wrap_pyfunction!(py_sample_pareto, m)?)?;
    m.add_function(wrap_pyfunction!(py_sample_frechet, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train_experiment, m)?)?;
    let kinds: Vec<&str> = PenaltyKind::ACTIVE.iter().map(|k| k.name()).collect();
    m.add("PENALTY_KINDS", kinds)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let w = matrix_from_rows(&rows).unwrap();
        assert_eq!(w.shape(), (2, 3));
        assert_eq!(matrix_to_rows(&w), rows);
    }

    #[test]
    fn ragged_rows_rejected() {
        Python::initialize();
        let err = matrix_from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        Python::attach(|py| assert!(err.is_instance_of::<PyValueError>(py)));
    }

    #[test]
    fn hill_k_default_is_auto() {
        assert_eq!(hill_k(None), HillK::Auto);
        assert_eq!(hill_k(Some(7)), HillK::Fixed(7));
    }
}
