//! Python bindings for the mixgda engine.
//!
//! Images cross the boundary as a flat `list[float]` plus a shape, `[C, H, W]`
//! for one image and `[N, C, H, W]` for a batch, values in `[-1, 1]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mixgda::config::{self, RunConfig};
use mixgda::gda::{de_fields, gccb, gvat, groi, roi_partition};
use mixgda::network::{ForwardOpts, Mode};
use mixgda::principal::{self, ReliabilityKind};
use mixgda::trainer::{self, TrainData};
use mixgda::verify::{self, Faults, SuiteSizes};
use mixgda::Tensor;

fn to_py(e: mixgda::Error) -> PyErr {
    match e {
        mixgda::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

fn kind(name: &str) -> PyResult<ReliabilityKind> {
    match name {
        "entropy" => Ok(ReliabilityKind::Entropy),
        "l2norm" => Ok(ReliabilityKind::L2norm),
        "cosine" => Ok(ReliabilityKind::Cosine),
        "inner" => Ok(ReliabilityKind::Inner),
        _ => Err(PyValueError::new_err(format!("unknown reliability kind `{name}`"))),
    }
}

/// A validated run configuration.
#[pyclass(name = "RunConfig", module = "mixgda_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: config::preset(name).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_json(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn preset_names() -> Vec<&'static str> {
        config::PRESET_NAMES.to_vec()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// Synthetic, tiny-network version with `steps` minibatches per cycle.
    fn desk_scale(&self, steps: usize) -> Self {
        Self {
            inner: self.inner.desk_scale(steps),
        }
    }

    /// Same run with only the labeled cross-entropy.
    fn supervised_only(&self) -> Self {
        let mut inner = self.inner.clone();
        inner.hp = inner.hp.supervised_only();
        Self { inner }
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.seed = seed;
        Self { inner }
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.dataset.classes()
    }

    /// `(channels, height, width)` of the dataset's images.
    #[getter]
    fn geometry(&self) -> (usize, usize, usize) {
        self.inner.dataset.geometry()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(name={:?}, seed={})", self.inner.name, self.inner.seed)
    }
}

#[pyclass(name = "Network", module = "mixgda_py", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: mixgda::network::Network,
}

#[pymethods]
impl PyNetwork {
    /// Freshly initialized network for `config`, in eval mode.
    #[staticmethod]
    fn build(config: &PyRunConfig) -> PyResult<Self> {
        let mut inner = trainer::build_network(&config.inner).map_err(to_py)?;
        inner.mode = Mode::Eval;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: mixgda::network::Network::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.snapshot()
    }

    fn set_weights(&mut self, weights: Vec<f64>) -> PyResult<()> {
        self.inner.load(&weights).map_err(to_py)
    }

    /// Eval-mode class probabilities of an `[N, C, H, W]` batch.
    fn predict(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let p = self.inner.predict(&tensor(images, shape)?, 256).map_err(to_py)?;
        Ok(p.unstack().into_iter().map(|r| r.data().to_vec()).collect())
    }

    /// Test error of this network on `config`'s test set.
    #[pyo3(signature = (config, data_root = PathBuf::from(".")))]
    fn error_rate(&self, config: &PyRunConfig, data_root: PathBuf) -> PyResult<f64> {
        let (_, test) = config.inner.dataset.load(&data_root).map_err(to_py)?;
        trainer::evaluate(&self.inner, &test).map_err(to_py)
    }

    /// One gradient-based augmentation of a `[C, H, W]` image with the
    /// config's hyperparameters. Returns the augmented pixels and a dict
    /// with `probs`, `de`, `d_rel`, `residual_mass` and `omega_low`.
    fn augment<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f64>,
        shape: Vec<usize>,
        which: &str,
        config: &PyRunConfig,
    ) -> PyResult<(Vec<f64>, Bound<'py, pyo3::types::PyDict>)> {
        let hp = &config.inner.hp;
        let u = tensor(image, shape)?;
        let batch = Tensor::stack(std::slice::from_ref(&u)).map_err(to_py)?;
        let f = de_fields(&self.inner, &batch, hp.a, &ForwardOpts::EVAL).map_err(to_py)?;
        let field = &f.fields[0];
        let probs = f.probs.data().to_vec();
        let part = roi_partition(field, hp.m_roi, hp.lambda_rate).map_err(to_py)?;
        let out = match which {
            "gvat" => gvat(&u, field, hp.eps),
            "gccb" => gccb(&u, field, hp.m_ccb, hp.mag_cont, hp.mag_bri).map_err(to_py)?,
            "groi" => groi(&u, &part, hp.m_roi, hp.zeta_groi).map_err(to_py)?,
            _ => return Err(PyValueError::new_err(format!("unknown augmentation `{which}`"))),
        };
        let info = pyo3::types::PyDict::new(py);
        info.set_item("de", principal::degenerated_entropy(&probs, hp.a).map_err(to_py)?)?;
        info.set_item("d_rel", principal::reliability(&probs, hp.reliability).map_err(to_py)?.value)?;
        info.set_item("residual_mass", principal::residual_mass(&probs, hp.a).map_err(to_py)?)?;
        info.set_item("omega_low", part.omega_low)?;
        info.set_item("probs", probs)?;
        Ok((out.data().to_vec(), info))
    }
}

#[pyclass(name = "TrainResult", module = "mixgda_py", get_all)]
struct PyTrainResult {
    prime: Py<PyNetwork>,
    averaged: Py<PyNetwork>,
    error_prime: f64,
    error_averaged: f64,
    /// Per-cycle breakdown rows, same columns as the metrics CSV.
    metrics_csv: String,
    snapshots: usize,
}

/// Trains `config` to completion and returns both finalized models.
#[pyfunction]
#[pyo3(signature = (config, data_root = PathBuf::from(".")))]
fn train(py: Python<'_>, config: &PyRunConfig, data_root: PathBuf) -> PyResult<PyTrainResult> {
    let cfg = config.inner.clone();
    let outcome = py
        .detach(|| {
            let data = TrainData::load(&cfg, &data_root)?;
            trainer::run_training(&cfg, &data, |_| {})
        })
        .map_err(to_py)?;
    Ok(PyTrainResult {
        prime: Py::new(py, PyNetwork { inner: outcome.prime })?,
        averaged: Py::new(py, PyNetwork { inner: outcome.averaged })?,
        error_prime: outcome.error_prime,
        error_averaged: outcome.error_averaged,
        metrics_csv: trainer::metrics_csv(&outcome.metrics),
        snapshots: outcome.snapshot_mean.count,
    })
}

#[pyfunction]
fn ppi(g: Vec<f64>, a: f64) -> PyResult<Vec<bool>> {
    let m = principal::ppi(&g, a).map_err(to_py)?;
    Ok((0..g.len()).map(|j| m.contains(j)).collect())
}

#[pyfunction]
fn ppd(g: Vec<f64>, a: f64) -> PyResult<Vec<f64>> {
    Ok(principal::ppd(&g, a).map_err(to_py)?.into_vec())
}

#[pyfunction]
fn degenerated_entropy(g: Vec<f64>, a: f64) -> PyResult<f64> {
    principal::degenerated_entropy(&g, a).map_err(to_py)
}

#[pyfunction]
fn residual_mass(g: Vec<f64>, a: f64) -> PyResult<f64> {
    principal::residual_mass(&g, a).map_err(to_py)
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> f64 {
    principal::entropy(&p)
}

/// `entropy`/`l2norm` take one distribution; `cosine`/`inner` take two.
#[pyfunction]
#[pyo3(signature = (p, kind_name, q = None))]
fn reliability(p: Vec<f64>, kind_name: &str, q: Option<Vec<f64>>) -> PyResult<f64> {
    let k = kind(kind_name)?;
    let r = match q {
        Some(q) => principal::reliability_pair(&p, &q, k),
        None => principal::reliability(&p, k),
    };
    Ok(r.map_err(to_py)?.value)
}

/// Runs the invariant suite; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (quick = true, broken_ccb_sign = false))]
fn run_verify(py: Python<'_>, quick: bool, broken_ccb_sign: bool) -> Vec<(String, bool, String)> {
    let sizes = if quick { SuiteSizes::quick() } else { SuiteSizes::default() };
    py.detach(|| verify::run_suite(sizes, Faults { broken_ccb_sign }))
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn mixgda_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ppi, m)?)?;
    m.add_function(wrap_pyfunction!(ppd, m)?)?;
    m.add_function(wrap_pyfunction!(degenerated_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(residual_mass, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(reliability, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
