//! Python bindings: chaotic maps and transforms, the NT-Xent loss and its
//! oracle, the cosine schedule, metrics, texture synthesis, checkpoints and
//! the full pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use chaos_ssl::chaos::{self, ChaoticMapSpec, ImageTensor, MapKind};
use chaos_ssl::harness::config::ExperimentConfig;
use chaos_ssl::harness::{checkpoint, data, metrics, pipeline, verify};
use chaos_ssl::seeding::derive_rng;
use chaos_ssl::ssl;
use chaos_ssl::tensor::Tensor;
use chaos_ssl::{finetune, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Stage { .. } | Error::Format(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

/// Chaotic map configuration.
#[pyclass(name = "MapSpec", from_py_object)]
#[derive(Clone)]
struct PyMapSpec {
    inner: ChaoticMapSpec,
}

#[pymethods]
impl PyMapSpec {
    #[new]
    #[pyo3(signature = (kind="tent", param=None, epsilon=1e-6, k_min=1, k_max=5, reclamp_each_step=false))]
    fn new(kind: &str, param: Option<f64>, epsilon: f64, k_min: u32, k_max: u32, reclamp_each_step: bool) -> PyResult<Self> {
        let kind: MapKind = kind.parse().map_err(to_py)?;
        let mut inner = ChaoticMapSpec::new(kind).with_k_range(k_min, k_max);
        inner.param = param.unwrap_or(inner.param);
        inner.epsilon = epsilon;
        inner.reclamp_each_step = reclamp_each_step;
        inner.validate().map_err(to_py)?;
        Ok(PyMapSpec { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    #[getter]
    fn param(&self) -> f64 {
        self.inner.param
    }

    #[getter]
    fn k_range(&self) -> (u32, u32) {
        (self.inner.k_min, self.inner.k_max)
    }

    fn step(&self, x: f64) -> PyResult<f64> {
        chaos::map_step(x, &self.inner).map_err(to_py)
    }

    /// `k` iterations after clamping `x0` into `[ε, 1 − ε]`.
    fn iterate(&self, x0: f64, k: u32) -> PyResult<f64> {
        chaos::iterate_map(x0, k, &self.inner).map_err(to_py)
    }

    /// `|orbit(x0) − orbit(x0 + delta)|` for `n` steps.
    fn sensitivity(&self, x0: f64, delta: f64, n: usize) -> PyResult<Vec<f64>> {
        chaos::sensitivity_probe(x0, delta, n, &self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "MapSpec(kind='{}', param={}, k_range=({}, {}))",
            self.inner.kind, self.inner.param, self.inner.k_min, self.inner.k_max
        )
    }
}

/// Pixel-wise chaotic transform of a flat channel-major image.
#[pyfunction]
fn chaotic_transform(pixels: Vec<f64>, shape: (usize, usize, usize), k: u32, spec: &PyMapSpec) -> PyResult<Vec<f64>> {
    let img = ImageTensor::new(shape.0, shape.1, shape.2, pixels).map_err(to_py)?;
    Ok(chaos::chaotic_transform(&img, k, &spec.inner).map_err(to_py)?.into_pixels())
}

/// NT-Xent of a `2N × d` matrix whose row `i` pairs with row `i + N`.
#[pyfunction]
#[pyo3(signature = (z, tau=0.5))]
fn nt_xent(z: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let z = matrix(z)?;
    let n = z.shape()[0] / 2;
    ssl::nt_xent_value(&z, &ssl::standard_pairing(n), tau).map_err(to_py)
}

/// Brute-force double loop reference for [`nt_xent`].
#[pyfunction]
#[pyo3(signature = (z, tau=0.5))]
fn nt_xent_oracle(z: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let z = matrix(z)?;
    let n = z.shape()[0] / 2;
    ssl::nt_xent_oracle(&z, &ssl::standard_pairing(n), tau).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (t, t_max, eta_max, eta_min=0.0))]
fn cosine_annealing_lr(t: usize, t_max: usize, eta_max: f64, eta_min: f64) -> PyResult<f64> {
    finetune::cosine_annealing_lr(t, t_max, eta_max, eta_min).map_err(to_py)
}

#[pyclass(name = "MetricsReport", skip_from_py_object)]
struct PyMetrics {
    inner: metrics::MetricsReport,
}

#[pymethods]
impl PyMetrics {
    /// Rows are true classes, columns predictions.
    #[staticmethod]
    fn from_confusion(confusion: Vec<Vec<u64>>) -> PyResult<Self> {
        let inner = metrics::MetricsReport::from_confusion(confusion).map_err(to_py)?;
        Ok(PyMetrics { inner })
    }

    #[staticmethod]
    fn from_predictions(truth: Vec<usize>, predicted: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        let inner = metrics::MetricsReport::from_predictions(&truth, &predicted, num_classes).map_err(to_py)?;
        Ok(PyMetrics { inner })
    }

    #[getter]
    fn accuracy(&self) -> f64 {
        self.inner.accuracy
    }

    #[getter]
    fn macro_f1(&self) -> f64 {
        self.inner.macro_f1
    }

    #[getter]
    fn confusion(&self) -> Vec<Vec<u64>> {
        self.inner.confusion.clone()
    }

    fn __repr__(&self) -> String {
        format!("MetricsReport(accuracy={}, macro_f1={})", self.inner.accuracy, self.inner.macro_f1)
    }
}

/// One texture of the default dataset as `(shape, pixels)`.
#[pyfunction]
#[pyo3(signature = (class_id, seed=0, noise=None))]
fn gen_texture(class_id: usize, seed: u64, noise: Option<f64>) -> PyResult<((usize, usize, usize), Vec<f64>)> {
    let mut cfg = ExperimentConfig::default();
    if let Some(n) = noise {
        cfg.dataset.noise_amplitude = n;
    }
    let spec = cfg.dataset.to_spec(seed);
    let img = data::gen_texture(class_id, &spec, &mut derive_rng(seed, &[class_id as u64])).map_err(to_py)?;
    Ok((img.shape(), img.into_pixels()))
}

/// Metadata and tensor shapes of a checkpoint file.
#[pyfunction]
fn inspect_checkpoint(path: PathBuf) -> PyResult<(BTreeMap<String, String>, Vec<(String, Vec<usize>)>)> {
    let ckpt = checkpoint::load_checkpoint(&path).map_err(to_py)?;
    let shapes = ckpt.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    Ok((ckpt.metadata, shapes))
}

/// Runs every stage and returns the contents of `metrics.json`.
#[pyfunction]
#[pyo3(signature = (out, config=None, seed=None, map=None, ssl_epochs=None))]
fn run_pipeline(
    py: Python<'_>,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    map: Option<&str>,
    ssl_epochs: Option<usize>,
) -> PyResult<String> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(&p).map_err(to_py)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(m) = map {
        cfg.map.kind = m.parse().map_err(to_py)?;
        cfg.map.param = None;
    }
    if let Some(e) = ssl_epochs {
        cfg.pretrain.epochs = e;
    }
    cfg.out_dir = out;
    cfg.validate().map_err(to_py)?;
    let report = py.detach(|| pipeline::run_pipeline(&cfg)).map_err(to_py)?;
    Ok(report.to_json())
}

/// Built-in self checks as `(name, passed, detail)` triples.
#[pyfunction]
fn self_check() -> Vec<(String, bool, String)> {
    verify::run_self_checks()
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

#[pymodule]
fn chaos_ssl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMapSpec>()?;
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(chaotic_transform, m)?)?;
    m.add_function(wrap_pyfunction!(nt_xent, m)?)?;
    m.add_function(wrap_pyfunction!(nt_xent_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_annealing_lr, m)?)?;
    m.add_function(wrap_pyfunction!(gen_texture, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(self_check, m)?)?;
    Ok(())
}
