//! Python bindings for the moment propagation engine.
//!
//! Tensors cross the boundary as a shape plus a flat, row-major list of floats.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use pfp_core::metrics::{self, InferenceMode, OodScore};
use pfp_core::validation;
use pfp_core::{DeterministicTensor, LogitDistribution, ModelGraph, ProbSampleSet};

create_exception!(pfp_engine, PfpError, PyException, "Raised for every engine error; the message starts with its class.");

fn err(e: pfp_core::PfpError) -> PyErr {
    PfpError::new_err(format!("{}: {e}", e.class()))
}

/// Plain input batch, leading dimension first.
#[pyclass(name = "Tensor", module = "pfp_engine", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: DeterministicTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor { inner: DeterministicTensor::new(shape, values).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTensor { inner: pfp_core::load_tensor(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        pfp_core::save_tensor(&self.inner, path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Per-class logit means and variances for a batch.
#[pyclass(name = "Logits", module = "pfp_engine", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLogits {
    inner: LogitDistribution,
}

#[pymethods]
impl PyLogits {
    #[new]
    fn new(batch: usize, classes: usize, mean: Vec<f64>, var: Vec<f64>) -> PyResult<Self> {
        Ok(PyLogits { inner: LogitDistribution::new(batch, classes, mean, var).map_err(err)? })
    }

    #[getter]
    fn batch(&self) -> usize {
        self.inner.batch()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.logit_mean().to_vec()
    }

    #[getter]
    fn var(&self) -> Vec<f64> {
        self.inner.logit_var().to_vec()
    }

    /// Softmax probability draws from independent per-class Gaussians.
    #[pyo3(signature = (n, seed = 42))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<PyProbSamples> {
        Ok(PyProbSamples { inner: metrics::logit_sample(&self.inner, n, seed).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Logits(batch={}, classes={})", self.inner.batch(), self.inner.classes())
    }
}

/// Logits of sampled networks, laid out `(sample, item, class)`.
#[pyclass(name = "Samples", module = "pfp_engine", frozen, get_all)]
struct PySamples {
    n_samples: usize,
    batch: usize,
    classes: usize,
    seed: u64,
    logits: Vec<f64>,
}

/// Probability vectors laid out `(sample, item, class)`.
#[pyclass(name = "ProbSamples", module = "pfp_engine", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyProbSamples {
    inner: ProbSampleSet,
}

#[pymethods]
impl PyProbSamples {
    #[new]
    fn new(n_samples: usize, batch: usize, classes: usize, probs: Vec<f64>) -> PyResult<Self> {
        Ok(PyProbSamples { inner: ProbSampleSet::new(n_samples, batch, classes, probs).map_err(err)? })
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn batch(&self) -> usize {
        self.inner.batch()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.inner.probs().to_vec()
    }

    fn mean_probs(&self) -> Vec<f64> {
        self.inner.mean_probs()
    }

    /// Per-item `entropy`, `sme` and `mi` lists, in nats.
    fn decompose<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = metrics::decompose(&self.inner);
        let out = PyDict::new(py);
        out.set_item("entropy", d.entropy)?;
        out.set_item("sme", d.sme)?;
        out.set_item("mi", d.mi)?;
        Ok(out)
    }
}

#[pyclass(name = "Model", module = "pfp_engine", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelGraph,
}

fn parse_mode(mode: &str, samples: usize) -> PyResult<InferenceMode> {
    match mode {
        "pfp" => Ok(InferenceMode::Pfp { logit_samples: samples }),
        "mc" => Ok(InferenceMode::Mc { samples }),
        other => Err(err(pfp_core::PfpError::InvalidArgument(format!("unknown mode `{other}`, expected pfp or mc")))),
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: pfp_core::load_model(path).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyModel { inner: pfp_core::format::decode_model(data).map_err(err)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = pfp_core::format::encode_model(&self.inner).map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        pfp_core::save_model(&self.inner, path).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn calibration_factor(&self) -> f64 {
        self.inner.calibration_factor()
    }

    #[getter]
    fn layers(&self) -> Vec<&'static str> {
        self.inner.layers().iter().map(|l| l.name()).collect()
    }

    /// Whether single-pass moments equal the sampled ones in expectation.
    fn moments_exact(&self) -> bool {
        self.inner.moments_exact()
    }

    /// A copy with every weight and bias variance scaled by `factor`.
    fn apply_calibration(&self, factor: f64) -> PyResult<PyModel> {
        Ok(PyModel { inner: self.inner.apply_calibration(factor).map_err(err)? })
    }

    fn forward(&self, py: Python<'_>, x: &PyTensor) -> PyResult<PyLogits> {
        let out = py.detach(|| self.inner.forward(&x.inner)).map_err(err)?;
        Ok(PyLogits { inner: out })
    }

    /// Means of the weights, run as a plain network.
    fn forward_mean(&self, py: Python<'_>, x: &PyTensor) -> PyResult<PyTensor> {
        let net = pfp_core::DeterministicNetwork::mean_of(&self.inner);
        Ok(PyTensor { inner: py.detach(|| net.forward(&x.inner)).map_err(err)? })
    }

    #[pyo3(signature = (x, n, seed = 42))]
    fn mc_predict(&self, py: Python<'_>, x: &PyTensor, n: usize, seed: u64) -> PyResult<PySamples> {
        let s = py.detach(|| pfp_core::mc_predict(&self.inner, &x.inner, n, seed)).map_err(err)?;
        Ok(PySamples { n_samples: s.n_samples, batch: s.batch, classes: s.classes, seed: s.seed, logits: s.logits })
    }

    /// Compares single-pass moments with `n` sampled networks; returns `(passed, report)`.
    #[pyo3(signature = (x, n = 10_000, seed = 42))]
    fn validate(&self, py: Python<'_>, x: &PyTensor, n: usize, seed: u64) -> PyResult<(bool, String)> {
        let r = py.detach(|| validation::validate(&self.inner, &x.inner, n, seed)).map_err(err)?;
        Ok((r.passed, r.to_text()))
    }

    /// Predictive probabilities under `mode` ("pfp" or "mc") with `samples` draws.
    #[pyo3(signature = (x, mode = "pfp", samples = 100, seed = 42))]
    fn predict(&self, py: Python<'_>, x: &PyTensor, mode: &str, samples: usize, seed: u64) -> PyResult<PyProbSamples> {
        let mode = parse_mode(mode, samples)?;
        let s = py.detach(|| metrics::predictive_samples(&self.inner, &x.inner, mode, seed)).map_err(err)?;
        Ok(PyProbSamples { inner: s })
    }

    /// Accuracy, NLL, ECE and uncertainty averages; AUROC when `ood` is given.
    #[pyo3(signature = (x, labels, ood = None, mode = "pfp", samples = 100, seed = 42, ece_bins = 10, ood_score = "mi"))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        x: &PyTensor,
        labels: Vec<usize>,
        ood: Option<PyRef<'py, PyTensor>>,
        mode: &str,
        samples: usize,
        seed: u64,
        ece_bins: usize,
        ood_score: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mode = parse_mode(mode, samples)?;
        let ood_score = match ood_score {
            "mi" => OodScore::MutualInformation,
            "entropy" => OodScore::Entropy,
            other => return Err(err(pfp_core::PfpError::InvalidArgument(format!("unknown OOD score `{other}`")))),
        };
        let data = metrics::Dataset { inputs: x.inner.clone(), labels };
        let opts = metrics::EvalOptions { ece_bins, ood_score };
        let ood = ood.as_ref().map(|t| &t.inner);
        let r = py.detach(|| metrics::evaluate(&self.inner, &data, mode, seed, ood, opts)).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("n_items", r.id.n_items)?;
        out.set_item("accuracy", r.accuracy)?;
        out.set_item("nll", r.nll)?;
        out.set_item("ece", r.ece)?;
        out.set_item("mean_entropy", r.id.mean_entropy)?;
        out.set_item("mean_sme", r.id.mean_sme)?;
        out.set_item("mean_mi", r.id.mean_mi)?;
        if let Some(o) = &r.ood {
            out.set_item("ood_mean_entropy", o.mean_entropy)?;
            out.set_item("ood_mean_sme", o.mean_sme)?;
            out.set_item("ood_mean_mi", o.mean_mi)?;
        }
        if let Some(a) = r.auroc {
            out.set_item("auroc", a)?;
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Model(name={:?}, layers={})", self.inner.name(), self.inner.layers().len())
    }
}

/// `(E[relu(X)], E[relu(X)²])` for `X ~ N(mean, var)`.
#[pyfunction]
fn relu_moments(mean: f64, var: f64) -> (f64, f64) {
    pfp_core::ops::relu_moments(mean, var)
}

/// Mean and variance of `max(X, Y)` for independent Gaussians.
#[pyfunction]
fn clark_max(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> (f64, f64) {
    pfp_core::ops::clark_max(mean_a, var_a, mean_b, var_b)
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    metrics::softmax(&logits)
}

#[pyfunction]
fn shannon_entropy(probs: Vec<f64>) -> f64 {
    metrics::shannon_entropy(&probs)
}

/// Probability that an OOD score exceeds an ID score, ties counting half.
#[pyfunction]
fn auroc(scores_id: Vec<f64>, scores_ood: Vec<f64>) -> PyResult<f64> {
    metrics::auroc(&scores_id, &scores_ood).map_err(err)
}

#[pyfunction]
fn accuracy(mean_probs: Vec<f64>, classes: usize, labels: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&mean_probs, classes, &labels).map_err(err)
}

#[pyfunction]
fn nll(mean_probs: Vec<f64>, classes: usize, labels: Vec<usize>) -> PyResult<f64> {
    metrics::nll(&mean_probs, classes, &labels).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (mean_probs, classes, labels, bins = 10))]
fn ece(mean_probs: Vec<f64>, classes: usize, labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    metrics::ece(&mean_probs, classes, &labels, bins).map_err(err)
}

#[pymodule]
fn pfp_engine(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PfpError", m.py().get_type::<PfpError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyLogits>()?;
    m.add_class::<PySamples>()?;
    m.add_class::<PyProbSamples>()?;
    m.add_function(wrap_pyfunction!(relu_moments, m)?)?;
    m.add_function(wrap_pyfunction!(clark_max, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(nll, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    Ok(())
}
