//! Python bindings for the fedtrinet simulator.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fedtrinet::experiment::{self, ExperimentConfig};
use fedtrinet::nn::{self, checkpoint, NetworkArchitecture, ParameterSet, Tensor};
use fedtrinet::trinet::{self, JointPrediction, ScheduleMode, SpliceSpec, ThresholdSchedule};
use fedtrinet::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_config_error() => PyValueError::new_err(e.to_string()),
        Error::ShapeMismatch { .. }
        | Error::FingerprintMismatch { .. }
        | Error::InvalidTensor(_)
        | Error::LabelOutOfRange { .. }
        | Error::EmptyAggregation
        | Error::AlignmentMismatch { .. } => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A network topology with its parameter fingerprint.
#[pyclass(name = "Architecture", frozen, from_py_object)]
#[derive(Clone)]
struct PyArchitecture(NetworkArchitecture);

#[pymethods]
impl PyArchitecture {
    /// The 28x28 grayscale, 10-class reference network.
    #[staticmethod]
    fn reference() -> Self {
        PyArchitecture(NetworkArchitecture::reference())
    }

    #[staticmethod]
    #[pyo3(signature = (channels=1, height=28, width=28, num_classes=10))]
    fn compact(channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        PyArchitecture(NetworkArchitecture::compact_for([channels, height, width], num_classes))
    }

    /// A 77-parameter network on 1x6x6 inputs with 3 classes.
    #[staticmethod]
    fn tiny() -> Self {
        PyArchitecture(NetworkArchitecture::tiny())
    }

    #[getter]
    fn fingerprint(&self) -> u64 {
        self.0.fingerprint()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.0.input_shape();
        (c, h, w)
    }

    #[getter]
    fn parameterized_layers(&self) -> Vec<usize> {
        self.0.parameterized_layers()
    }

    fn __repr__(&self) -> String {
        format!(
            "Architecture(input_shape={:?}, num_classes={}, num_parameters={})",
            self.0.input_shape(),
            self.0.num_classes(),
            self.0.num_parameters()
        )
    }
}

/// Weights and biases of every parameterized layer.
#[pyclass(name = "ParameterSet", frozen, from_py_object)]
#[derive(Clone)]
struct PyParams(ParameterSet);

#[pymethods]
impl PyParams {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    #[staticmethod]
    fn init(arch: &PyArchitecture, seed: u64) -> Self {
        PyParams(nn::init_params(&arch.0, seed))
    }

    #[staticmethod]
    fn zeros(arch: &PyArchitecture) -> Self {
        PyParams(ParameterSet::zeros(&arch.0))
    }

    #[staticmethod]
    fn load(arch: &PyArchitecture, path: PathBuf) -> PyResult<Self> {
        checkpoint::load_params(&arch.0, &path).map(PyParams).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_params(&self.0, &path).map_err(to_py)
    }

    /// All values flattened layer by layer, weights before biases.
    fn values(&self) -> Vec<f64> {
        self.0.values().collect()
    }

    fn with_values(&self, values: Vec<f64>) -> PyResult<Self> {
        self.0.with_values(&values).map(PyParams).map_err(to_py)
    }

    #[getter]
    fn fingerprint(&self) -> u64 {
        self.0.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.0.num_values()
    }

    fn __eq__(&self, other: &PyParams) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!(
            "ParameterSet(layers={}, values={})",
            self.0.entries().len(),
            self.0.num_values()
        )
    }
}

/// Class probabilities for a batch of flattened `C*H*W` images.
#[pyfunction]
fn forward(arch: &PyArchitecture, params: &PyParams, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let [c, h, w] = arch.0.input_shape();
    let tensors = images
        .into_iter()
        .map(|px| Tensor::new(vec![c, h, w], px))
        .collect::<fedtrinet::Result<Vec<_>>>()
        .map_err(to_py)?;
    let probs = nn::forward_chunked(&arch.0, &params.0, &tensors.iter().collect::<Vec<_>>(), 100).map_err(to_py)?;
    Ok((0..probs.shape()[0]).map(|i| probs.row(i).to_vec()).collect())
}

/// Element-wise mean of parameter sets.
#[pyfunction]
fn aggregate(sets: Vec<PyRef<'_, PyParams>>) -> PyResult<PyParams> {
    let refs: Vec<&ParameterSet> = sets.iter().map(|p| &p.0).collect();
    fedtrinet::federation::aggregate(&refs).map(PyParams).map_err(to_py)
}

/// The first `cutoff` parameterized layers from `global_params`, the rest from `local_params`.
#[pyfunction]
#[pyo3(signature = (global_params, local_params, cutoff=2))]
fn splice(global_params: &PyParams, local_params: &PyParams, cutoff: usize) -> PyResult<PyParams> {
    trinet::splice(&global_params.0, &local_params.0, SpliceSpec { shallow_cutoff: cutoff })
        .map(PyParams)
        .map_err(to_py)
}

/// Server threshold for pseudo-label round `t`.
#[pyfunction]
#[pyo3(signature = (theta_bar, t, alpha=0.93, mode="clamped", breakpoints=(10, 35)))]
fn global_threshold(theta_bar: f64, t: usize, alpha: f64, mode: &str, breakpoints: (usize, usize)) -> PyResult<f64> {
    let mode = match mode {
        "clamped" => ScheduleMode::Clamped,
        "literal" => ScheduleMode::Literal,
        other => return Err(PyValueError::new_err(format!("unknown schedule mode {other:?}"))),
    };
    Ok(trinet::global_threshold(theta_bar, t, alpha, &ThresholdSchedule { mode, breakpoints }))
}

/// Mean of three probability vectors as `(probs, label, confidence)`.
#[pyfunction]
fn joint_prediction(local: Vec<f64>, global_: Vec<f64>, combined: Vec<f64>) -> PyResult<(Vec<f64>, usize, f64)> {
    let p = JointPrediction::from_players(&local, &global_, &combined).map_err(to_py)?;
    Ok((p.probs, p.pseudo_label, p.confidence))
}

/// Indices of the predictions whose joint confidence is strictly above `theta`.
#[pyfunction]
fn select_pseudo(predictions: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>, theta: f64) -> PyResult<Vec<usize>> {
    let joint = predictions
        .iter()
        .map(|(l, g, c)| JointPrediction::from_players(l, g, c))
        .collect::<fedtrinet::Result<Vec<_>>>()
        .map_err(to_py)?;
    Ok(trinet::select_indices(&joint, theta))
}

/// Largest relative error between analytic and finite-difference gradients of the tiny network.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradient_check(seed: u64) -> PyResult<f64> {
    nn::gradient_check(&NetworkArchitecture::tiny(), seed).map_err(to_py)
}

/// Runs the experiment in a config file and returns its summary.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_path: PathBuf) -> PyResult<Py<pyo3::types::PyDict>> {
    let mut cfg = ExperimentConfig::from_file(&config_path).map_err(to_py)?;
    cfg.apply_env_overrides().map_err(to_py)?;
    let s = py.detach(|| experiment::run_experiment(&cfg)).map_err(to_py)?.summary;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("experiment_id", s.experiment_id)?;
    d.set_item("mode", s.mode.as_str())?;
    d.set_item("final_accuracy", s.final_accuracy)?;
    d.set_item("best_accuracy", s.best_accuracy)?;
    d.set_item("pseudo_labels_used", s.pseudo_labels_used)?;
    d.set_item("metrics_path", s.metrics_path)?;
    d.set_item("checkpoint_path", s.checkpoint_path)?;
    Ok(d.unbind())
}

/// Text summary of a metrics CSV.
#[pyfunction]
fn report(metrics_path: PathBuf) -> PyResult<String> {
    experiment::emit_summary(&metrics_path).map_err(to_py)
}

#[pymodule]
fn fedtrinet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyArchitecture>()?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(splice, m)?)?;
    m.add_function(wrap_pyfunction!(global_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(joint_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(select_pseudo, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
