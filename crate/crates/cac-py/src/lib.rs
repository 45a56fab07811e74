//! Python bindings: datasets, models, and the pretrain/adapt/evaluate
//! pipeline, plus a few numeric helpers.
//!
//! Build with `cargo build -p cac-py --release` and rename
//! `libcac_py.so` to `cac_py.so` on the Python path (the smoke test in
//! `python/smoke_test.py` does this automatically).

use cac_core::config::TrainConfig;
use cac_core::data::{self, DomainTag, LabeledDataset};
use cac_core::error::CacError;
use cac_core::harness::{self, MetricsReport};
use cac_core::losses::{decay_factor as decay, DecaySchedule};
use cac_core::matrix::Matrix;
use cac_core::model::{model_from_json, model_to_json, ModelParams};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;

fn to_py_err(err: CacError) -> PyErr {
    match err {
        CacError::Numeric(_) => PyArithmeticError::new_err(err.to_string()),
        CacError::Io(_) => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn parse_config(json: &str) -> PyResult<TrainConfig> {
    TrainConfig::from_json(json).map_err(to_py_err)
}

/// A labeled dataset (features, integer labels, class count).
#[pyclass(name = "Dataset")]
pub struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from nested feature lists and labels.
    #[new]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> PyResult<Self> {
        let x = Matrix::from_rows(&features).map_err(to_py_err)?;
        let inner = LabeledDataset::new(x, labels, classes, DomainTag::Target).map_err(to_py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn from_csv(path: PathBuf) -> PyResult<Self> {
        let inner = data::read_csv(&path, DomainTag::Target, None).map_err(to_py_err)?;
        Ok(PyDataset { inner })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        data::write_csv(&self.inner, &path).map_err(to_py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.y.clone()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len())
            .map(|i| self.inner.x.row(i).to_vec())
            .collect()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// The two-stage network (feature extractor plus linear classifier).
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = cac_core::model::load_model(&path).map_err(to_py_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: model_from_json(text).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cac_core::model::save_model(&self.inner, &path).map_err(to_py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        model_to_json(&self.inner).map_err(to_py_err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

/// Per-class and aggregate accuracies from one evaluation.
#[pyclass(name = "Report")]
pub struct PyReport {
    inner: MetricsReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.inner.per_class_accuracy.clone()
    }

    #[getter]
    fn avg(&self) -> f64 {
        self.inner.avg
    }

    #[getter]
    fn overall(&self) -> f64 {
        self.inner.overall
    }

    #[getter]
    fn epoch_curve(&self) -> Vec<(usize, f64)> {
        self.inner.epoch_curve.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(avg={:.2}, overall={:.2}, classes={})",
            self.inner.avg,
            self.inner.overall,
            self.inner.per_class_accuracy.len()
        )
    }
}

/// The default three-class benchmark configuration, as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    TrainConfig::default().to_json().map_err(to_py_err)
}

/// The five-class component-study configuration, as JSON.
#[pyfunction]
fn ablation_config() -> PyResult<String> {
    TrainConfig::ablation_benchmark().to_json().map_err(to_py_err)
}

/// Generates the (source, target) benchmark pair described by a config.
#[pyfunction]
fn generate_blobs(config_json: &str) -> PyResult<(PyDataset, PyDataset)> {
    let config = parse_config(config_json)?;
    let (source, target) = data::generate_two_domain_blobs(&config.shift).map_err(to_py_err)?;
    Ok((PyDataset { inner: source }, PyDataset { inner: target }))
}

/// Supervised pretraining on a labeled source dataset.
#[pyfunction]
fn pretrain(config_json: &str, source: &PyDataset) -> PyResult<PyModel> {
    let config = parse_config(config_json)?;
    let inner = harness::pretrain_source(&config, &source.inner).map_err(to_py_err)?;
    Ok(PyModel { inner })
}

/// Source-free adaptation of a pretrained model to an unlabeled target.
/// Returns the adapted model and its final evaluation report.
#[pyfunction]
fn adapt(config_json: &str, model: &PyModel, target: &PyDataset) -> PyResult<(PyModel, PyReport)> {
    let config = parse_config(config_json)?;
    let outcome =
        harness::adapt_target(model.inner.clone(), &target.inner, &config).map_err(to_py_err)?;
    Ok((
        PyModel {
            inner: outcome.model,
        },
        PyReport {
            inner: outcome.report,
        },
    ))
}

/// Per-class accuracy of a model on a labeled dataset.
#[pyfunction]
fn evaluate(model: &PyModel, dataset: &PyDataset) -> PyResult<PyReport> {
    let inner = harness::evaluate(&model.inner, &dataset.inner).map_err(to_py_err)?;
    Ok(PyReport { inner })
}

/// Negative-term decay factor `(max_iter / (max_iter + iter)) ** beta`.
#[pyfunction]
fn decay_factor(iter: usize, beta: f64, max_iter: usize) -> PyResult<f64> {
    if max_iter == 0 {
        return Err(PyValueError::new_err("max_iter must be positive"));
    }
    Ok(decay(iter, &DecaySchedule { beta, max_iter }))
}

/// Row-wise softmax of a nested list.
#[pyfunction]
fn softmax(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = Matrix::from_rows(&rows).map_err(to_py_err)?;
    let s = cac_core::matrix::softmax(&m).map_err(to_py_err)?;
    Ok((0..s.rows()).map(|r| s.row(r).to_vec()).collect())
}

/// Unweighted mean of per-class accuracies.
#[pyfunction]
fn macro_average(per_class: Vec<f64>) -> PyResult<f64> {
    if per_class.is_empty() {
        return Err(PyValueError::new_err("empty accuracy list"));
    }
    Ok(harness::macro_average(&per_class))
}

#[pymodule]
fn cac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(decay_factor, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(macro_average, m)?)?;
    Ok(())
}
