//! Python bindings: tensors, configuration, the fusion network, training,
//! losses and the evaluation metrics.

use std::path::PathBuf;

use ignet_core::dataset::ImagePair;
use ignet_core::loss::loss_total;
use ignet_core::{codec, metrics, network, train, Error, FusionConfig, NetworkParams, Tape};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense NCHW float32 tensor.
#[pyclass(name = "Tensor", module = "ignet", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: ignet_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: ignet_core::Tensor::new(shape, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: ignet_core::Tensor::zeros(shape),
        }
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f32) -> Self {
        Self {
            inner: ignet_core::Tensor::full(shape, value),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Architecture, loss and optimiser settings, round-tripped through JSON.
#[pyclass(name = "Config", module = "ignet", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: FusionConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by a JSON object string.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => FusionConfig::from_json_str(text).map_err(py_err)?,
            None => FusionConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: FusionConfig::load(path).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.nodes
    }

    #[getter]
    fn loops(&self) -> usize {
        self.inner.loops
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.to_json().unwrap_or_default())
    }
}

/// Network parameters together with the configuration they were built for.
#[pyclass(name = "Network", module = "ignet")]
pub struct PyNetwork {
    params: NetworkParams,
    config: FusionConfig,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (config = None, seed = None))]
    fn new(config: Option<PyConfig>, seed: Option<u64>) -> PyResult<Self> {
        let config = config.map(|c| c.inner).unwrap_or_default();
        let seed = seed.unwrap_or(config.seed);
        let params = NetworkParams::init(&config, seed).map_err(py_err)?;
        Ok(Self { params, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = network::load_checkpoint(path).map_err(py_err)?;
        Ok(Self { params, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        network::save_checkpoint(&self.params, &self.config, path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    fn parameter(&self, name: &str) -> PyResult<PyTensor> {
        self.params
            .get(name)
            .map(|t| PyTensor { inner: t.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name}")))
    }

    /// Fused luminance for a pair of `[B, 1, H, W]` images in [0, 1].
    fn fuse(&self, py: Python<'_>, ir: &PyTensor, vis: &PyTensor) -> PyResult<PyTensor> {
        let (params, config) = (&self.params, &self.config);
        let out = py.detach(|| network::fuse(params, config, &ir.inner, &vis.inner));
        Ok(PyTensor {
            inner: out.map_err(py_err)?,
        })
    }

    /// Loss terms of the current parameters on one pair.
    fn loss<'py>(&self, py: Python<'py>, ir: &PyTensor, vis: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape, false);
        let a = tape.constant(ir.inner.clone());
        let b = tape.constant(vis.inner.clone());
        let out = network::forward(&mut tape, a, b, &pv, &self.config).map_err(py_err)?;
        let parts = loss_total(&mut tape, a, b, out.fused, &self.config.loss).map_err(py_err)?;
        let v = parts.values(&tape);
        let d = PyDict::new(py);
        d.set_item("total", v.total)?;
        d.set_item("mse", v.mse)?;
        d.set_item("edge", v.edge)?;
        d.set_item("ssim", v.ssim)?;
        Ok(d)
    }

    /// Train from scratch on the given pairs with this network's
    /// configuration; returns the logged loss totals.
    fn train(&mut self, py: Python<'_>, pairs: Vec<(PyTensor, PyTensor)>) -> PyResult<Vec<f32>> {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (ir, vis))| ImagePair::new(format!("pair{i}"), ir.inner, vis.inner, None))
            .collect::<ignet_core::Result<Vec<_>>>()
            .map_err(py_err)?;
        let config = &self.config;
        let (params, log) = py.detach(|| train::train(&pairs, config)).map_err(py_err)?;
        self.params = params;
        Ok(log.records().iter().map(|r| r.total).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(channels={}, nodes={}, loops={}, parameters={})",
            self.config.channels,
            self.config.nodes,
            self.config.loops,
            self.params.count()
        )
    }
}

/// EN, AG, CC, SCD, Qabf and SSIM for one fused image.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, ir: &PyTensor, vis: &PyTensor, fused: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
    let s = metrics::evaluate(&ir.inner, &vis.inner, &fused.inner).map_err(py_err)?;
    let d = PyDict::new(py);
    for (key, value) in ["EN", "AG", "CC", "SCD", "Qabf", "SSIM"].into_iter().zip(s.as_array()) {
        d.set_item(key, value)?;
    }
    Ok(d)
}

#[pyfunction]
fn read_image(path: PathBuf) -> PyResult<PyTensor> {
    let (_, inner) = codec::read_pnm(path).map_err(py_err)?;
    Ok(PyTensor { inner })
}

/// Writes P5 for one channel, P6 for three.
#[pyfunction]
fn write_image(image: &PyTensor, path: PathBuf) -> PyResult<()> {
    let bytes = codec::encode_pnm(&image.inner).map_err(py_err)?;
    std::fs::write(&path, bytes).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
}

#[pymodule]
fn ignet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(read_image, m)?)?;
    m.add_function(wrap_pyfunction!(write_image, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
