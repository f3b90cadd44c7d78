//! Python bindings: model configs, adapter management, training, packages and the hub.

use std::path::PathBuf;

use adaptkit::package::metadata_stub;
use adaptkit::train::{generate_toy_task as toy_task, predict_class};
use adaptkit::{AdapterType, HeadKind, LoadOptions, TrainConfig, TrainMode};
use adaptkit_hub::{ingest_file, HubError, HubIndex};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyString};

fn core_err(e: adaptkit::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn hub_err(e: HubError) -> PyErr {
    match e {
        HubError::Package(inner) => core_err(inner),
        HubError::Io(_) | HubError::Transport { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match value {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            PyList::new(py, items.iter().map(|v| to_py(py, v)).collect::<PyResult<Vec<_>>>()?)?.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, to_py(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py>(py: Python<'py>, value: impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &json)
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig(adaptkit::ModelConfig);

#[pymethods]
impl PyModelConfig {
    #[staticmethod]
    fn desk() -> Self {
        Self(adaptkit::ModelConfig::desk())
    }

    #[staticmethod]
    fn base() -> Self {
        Self(adaptkit::ModelConfig::bert_base())
    }

    #[staticmethod]
    fn large() -> Self {
        Self(adaptkit::ModelConfig::bert_large())
    }

    #[staticmethod]
    fn from_descriptor(text: &str) -> PyResult<Self> {
        adaptkit::ModelConfig::from_descriptor(text).map(Self).map_err(core_err)
    }

    fn descriptor(&self) -> String {
        self.0.descriptor()
    }

    #[getter]
    fn hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn hidden_size(&self) -> usize {
        self.0.hidden_size
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.0.num_layers
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig(hidden_size={}, num_layers={}, hash={})", self.0.hidden_size, self.0.num_layers, &self.0.hash()[..12])
    }
}

fn adapter_config(preset: &str, reduction_factor: Option<usize>) -> PyResult<adaptkit::AdapterConfig> {
    let cfg = adaptkit::preset(preset).map_err(core_err)?;
    Ok(match reduction_factor {
        Some(rf) => cfg.with_reduction_factor(rf),
        None => cfg,
    })
}

/// Trainable adapter parameters for `preset` on a model of shape `config`.
#[pyfunction]
#[pyo3(signature = (config, preset, reduction_factor=None))]
fn count_adapter_params(config: &PyModelConfig, preset: &str, reduction_factor: Option<usize>) -> PyResult<usize> {
    Ok(adaptkit::count_adapter_params(&config.0, &adapter_config(preset, reduction_factor)?))
}

#[pyclass(name = "Model")]
struct PyModel(adaptkit::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        adaptkit::Model::new(config.0.clone(), seed).map(Self).map_err(core_err)
    }

    #[staticmethod]
    fn load_backbone(path: PathBuf) -> PyResult<Self> {
        adaptkit::load_backbone(&path).map(Self).map_err(core_err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig(self.0.config().clone())
    }

    fn base_digest(&self) -> String {
        self.0.base_digest()
    }

    #[pyo3(signature = (name, preset="pfeiffer", reduction_factor=None, adapter_type="text_task"))]
    fn add_adapter(&mut self, name: &str, preset: &str, reduction_factor: Option<usize>, adapter_type: &str) -> PyResult<usize> {
        let t: AdapterType = adapter_type.parse().map_err(core_err)?;
        let cfg = adapter_config(preset, reduction_factor)?;
        self.0.add_adapter(name, t, cfg).map(|e| e.num_params()).map_err(core_err)
    }

    fn delete_adapter(&mut self, name: &str) -> PyResult<()> {
        self.0.delete_adapter(name).map(|_| ()).map_err(core_err)
    }

    fn adapter_names(&self) -> Vec<String> {
        self.0.adapter_names()
    }

    #[pyo3(signature = (name, num_classes=2))]
    fn add_head(&mut self, name: &str, num_classes: usize) -> PyResult<()> {
        self.0.add_head(name, HeadKind::Classification { num_classes }).map(|_| ()).map_err(core_err)
    }

    fn set_active(&mut self, stack: Vec<String>) -> PyResult<()> {
        self.0.set_active(&stack).map_err(core_err)
    }

    fn active_stack(&self) -> Vec<String> {
        self.0.active_stack().to_vec()
    }

    fn train_adapter(&mut self, names: Vec<String>) -> PyResult<()> {
        self.0.train_adapter(&names).map_err(core_err)
    }

    /// Hidden states (one row per token) through `stack`, or the active stack when omitted.
    #[pyo3(signature = (token_ids, stack=None))]
    fn encode(&self, token_ids: Vec<usize>, stack: Option<Vec<String>>) -> PyResult<Vec<Vec<f64>>> {
        let enc = match stack {
            Some(s) => self.0.encode_with(&token_ids, &s),
            None => self.0.encode(&token_ids),
        }
        .map_err(core_err)?;
        let width = enc.hidden.shape()[1];
        Ok(enc.hidden.data().chunks(width).map(<[f64]>::to_vec).collect())
    }

    fn predict(&self, head: &str, token_ids: Vec<usize>) -> PyResult<usize> {
        predict_class(&self.0, head, &token_ids).map_err(core_err)
    }

    /// Train on a toy task and return the final dev accuracy.
    #[pyo3(signature = (head, task, mode="adapter_only", seed=0, steps=500, learning_rate=None, batch_size=16))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        head: &str,
        task: &str,
        mode: &str,
        seed: u64,
        steps: usize,
        learning_rate: Option<f64>,
        batch_size: usize,
    ) -> PyResult<f64> {
        let mode: TrainMode = mode.parse().map_err(core_err)?;
        let task = toy_task(task, seed).map_err(core_err)?;
        let mut cfg = TrainConfig::new(mode, seed);
        cfg.max_steps = steps;
        cfg.batch_size = batch_size;
        if let Some(lr) = learning_rate {
            cfg.learning_rate = lr;
        }
        adaptkit::train(&mut self.0, head, &task, &cfg).map(|log| log.dev_metric).map_err(core_err)
    }

    /// Save adapter `name` (and optionally a head) as a package; returns its sha256.
    #[pyo3(signature = (name, path, head=None))]
    fn save_adapter(&self, name: &str, path: PathBuf, head: Option<&str>) -> PyResult<String> {
        adaptkit::save_adapter_with_head(&self.0, name, head, &path).map(|p| p.sha256).map_err(core_err)
    }

    #[pyo3(signature = (path, rename=None, load_head=false))]
    fn load_adapter(&mut self, path: PathBuf, rename: Option<String>, load_head: bool) -> PyResult<String> {
        let opts = LoadOptions { config: None, rename, load_head };
        adaptkit::load_adapter(&mut self.0, &path, &opts).map_err(core_err)
    }

    #[pyo3(signature = (path, head=None))]
    fn save_backbone(&self, path: PathBuf, head: Option<&str>) -> PyResult<String> {
        adaptkit::save_backbone(&self.0, head, &path).map(|p| p.sha256).map_err(core_err)
    }
}

/// `(train, dev)` splits of a toy task as lists of `(tokens, label)`.
#[pyfunction]
#[pyo3(signature = (name, seed=0))]
#[allow(clippy::type_complexity)]
fn generate_toy_task(name: &str, seed: u64) -> PyResult<(Vec<(Vec<usize>, usize)>, Vec<(Vec<usize>, usize)>)> {
    let task = toy_task(name, seed).map_err(core_err)?;
    let split = |s: &[adaptkit::train::Example]| s.iter().map(|e| (e.tokens.clone(), e.label)).collect();
    Ok((split(&task.train), split(&task.dev)))
}

/// Zip a package with its config and a metadata stub, then return the verification report.
#[pyfunction]
fn pack_zip<'py>(py: Python<'py>, package: PathBuf, destination: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let pkg = adaptkit::read_package(&package).map_err(core_err)?;
    adaptkit::pack_zip(&package, &metadata_stub(&pkg).map_err(core_err)?, &destination).map_err(core_err)?;
    verify_zip(py, destination)
}

#[pyfunction]
fn verify_zip(py: Python<'_>, path: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    serialize(py, adaptkit::verify_zip(&path).map_err(core_err)?)
}

/// Validate metadata files, write the index and return the number of entries.
#[pyfunction]
fn build_index(metadata: Vec<PathBuf>, out: PathBuf) -> PyResult<usize> {
    let entries = metadata.iter().map(|p| ingest_file(p)).collect::<Result<Vec<_>, _>>().map_err(hub_err)?;
    let index = HubIndex::build(entries).map_err(hub_err)?;
    index.save(&out).map_err(hub_err)?;
    Ok(index.entries().len())
}

/// Resolve a name fragment for a model hash against an index file.
#[pyfunction]
#[pyo3(signature = (index, query, model_hash, config=None))]
fn resolve<'py>(
    py: Python<'py>,
    index: PathBuf,
    query: &str,
    model_hash: &str,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let index = HubIndex::load(&index).map_err(hub_err)?;
    let entry = index.resolve(query, model_hash, config).map_err(hub_err)?;
    serialize(py, entry)
}

#[pymodule]
fn adaptkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(count_adapter_params, m)?)?;
    m.add_function(wrap_pyfunction!(generate_toy_task, m)?)?;
    m.add_function(wrap_pyfunction!(pack_zip, m)?)?;
    m.add_function(wrap_pyfunction!(verify_zip, m)?)?;
    m.add_function(wrap_pyfunction!(build_index, m)?)?;
    m.add_function(wrap_pyfunction!(resolve, m)?)?;
    Ok(())
}
