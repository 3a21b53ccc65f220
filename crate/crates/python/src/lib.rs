//! Python bindings. Structured results (plans, run records, reports) come
//! back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use cowclip::clip;
use cowclip::data::{self, PresenceMode};
use cowclip::harness::{self, train::load_dataset, ExperimentConfig};
use cowclip::metrics;
use cowclip::models::ModelKind;
use cowclip::scaling::{self, BaseHyperparams, Preset, Rule};

fn err(e: cowclip::Error) -> PyErr {
    match e {
        cowclip::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        cowclip::Error::InvalidArgument(_)
        | cowclip::Error::Config(_)
        | cowclip::Error::Index(_)
        | cowclip::Error::Parse { .. }
        | cowclip::Error::UndefinedMetric(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rule(name: &str) -> PyResult<Rule> {
    name.parse().map_err(err)
}

/// Hyperparameters for `rule` at `target_batch`, scaled from the base values.
#[pyfunction]
#[pyo3(signature = (rule_name, target_batch, base_batch=1024, lr_dense=1e-4, lr_embed=1e-4, l2=1e-4))]
fn scale<'py>(
    py: Python<'py>,
    rule_name: &str,
    target_batch: u64,
    base_batch: u64,
    lr_dense: f64,
    lr_embed: f64,
    l2: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let base = BaseHyperparams {
        base_batch,
        lr_dense,
        lr_embed,
        l2,
    };
    to_py(py, &scaling::scale_to_batch(rule(rule_name)?, &base, target_batch).map_err(err)?)
}

#[pyfunction]
fn preset_plan<'py>(py: Python<'py>, name: &str, target_batch: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &Preset::by_name(name).map_err(err)?.plan(target_batch).map_err(err)?)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (probs, labels, eps=metrics::DEFAULT_PROB_EPS))]
fn logloss(probs: Vec<f64>, labels: Vec<u8>, eps: f64) -> PyResult<f64> {
    metrics::logloss(&probs, &labels, eps).map_err(err)
}

/// `1-(1-p)^b`, or the approximation `min(1, b·p)` with `exact=False`.
#[pyfunction]
#[pyo3(signature = (p, batch_size, exact=true))]
fn batch_presence_probability(p: f64, batch_size: u64, exact: bool) -> PyResult<f64> {
    if !(0.0..=1.0).contains(&p) || batch_size == 0 {
        return Err(PyValueError::new_err("need p in [0, 1] and batch_size >= 1"));
    }
    let mode = if exact { PresenceMode::Exact } else { PresenceMode::Approx };
    Ok(data::batch_presence_probability(p, batch_size, mode))
}

#[pyfunction]
fn cowclip_threshold(cnt: u32, w_norm: f64, r: f64, zeta: f64) -> f64 {
    clip::cowclip_threshold(cnt, w_norm, r, zeta)
}

/// Clips one embedding column's gradient against its weights.
#[pyfunction]
fn cowclip_column(weights: Vec<f64>, grad: Vec<f64>, cnt: u32, r: f64, zeta: f64) -> PyResult<Vec<f64>> {
    if weights.len() != grad.len() {
        return Err(PyValueError::new_err("weights and grad differ in length"));
    }
    let norm = weights.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut g = grad;
    clip::clip_by_threshold(&mut g, clip::cowclip_threshold(cnt, norm, r, zeta));
    Ok(g)
}

#[pyfunction]
fn expected_update_frequency<'py>(py: Python<'py>, p: f64, b: u64, s: u64, eta: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &scaling::expected_update_frequency(p, b, s, eta))
}

#[pyfunction]
#[pyo3(signature = (model="deepfm", seed=1234, trials=100))]
fn grad_check<'py>(py: Python<'py>, model: &str, seed: u64, trials: usize) -> PyResult<Bound<'py, PyAny>> {
    let kind: ModelKind = model.parse().map_err(err)?;
    to_py(py, &harness::grad_check(kind, seed, trials).map_err(err)?)
}

/// Runs the named verification suites (all of them when `suites` is empty).
#[pyfunction]
#[pyo3(signature = (suites=Vec::new(), seed=1234))]
fn verify<'py>(py: Python<'py>, suites: Vec<String>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &harness::verify(&suites, seed).map_err(err)?)
}

/// Experiment configuration, addressed by the same dotted keys as the
/// config files.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => ExperimentConfig::from_str_pairs(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::from_file(&path).map_err(err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.apply(&[(key.to_string(), value.to_string())]).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_pairs_text()
    }

    fn train<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.inner.clone();
        let record = py.detach(move || harness::train(&cfg)).map_err(err)?;
        to_py(py, &record)
    }

    /// Runs every (rule, batch size) pair on one dataset; uses the
    /// configured sweep lists when arguments are omitted.
    #[pyo3(signature = (batch_sizes=None, rules=None))]
    fn sweep<'py>(&self, py: Python<'py>, batch_sizes: Option<Vec<usize>>, rules: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
        let sizes = batch_sizes.unwrap_or_else(|| self.inner.sweep_batch_sizes.clone());
        let rules = match rules {
            Some(names) => names.iter().map(|n| rule(n)).collect::<PyResult<Vec<_>>>()?,
            None => self.inner.sweep_rules.clone(),
        };
        let cfg = self.inner.clone();
        let res = py.detach(move || harness::sweep(&cfg, &sizes, &rules)).map_err(err)?;
        to_py(py, &res)
    }

    fn dataset(&self) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: load_dataset(&self.inner).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Config(<{} keys>)", self.inner.to_pairs_text().lines().count())
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::Dataset::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    fn ids(&self, row: usize) -> PyResult<Vec<u32>> {
        if row >= self.inner.len() {
            return Err(PyValueError::new_err(format!("row {row} out of range")));
        }
        Ok(self.inner.ids_row(row).to_vec())
    }

    fn dense(&self, row: usize) -> PyResult<Vec<f64>> {
        if row >= self.inner.len() {
            return Err(PyValueError::new_err(format!("row {row} out of range")));
        }
        Ok(self.inner.dense_row(row).to_vec())
    }

    /// Per-field occurrence counts, indexed by id.
    fn frequencies(&self) -> PyResult<Vec<Vec<u64>>> {
        let f = data::count_frequencies(&self.inner).map_err(err)?;
        Ok((0..f.n_fields()).map(|j| f.field_counts(j).to_vec()).collect())
    }

    fn top_k_collapse(&self, k: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::top_k_collapse(&self.inner, k).map_err(err)?,
        })
    }
}

#[pymodule]
pub fn cowclip_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scale, m)?)?;
    m.add_function(wrap_pyfunction!(preset_plan, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add_function(wrap_pyfunction!(batch_presence_probability, m)?)?;
    m.add_function(wrap_pyfunction!(cowclip_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(cowclip_column, m)?)?;
    m.add_function(wrap_pyfunction!(expected_update_frequency, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add("RULES", Rule::ALL.iter().map(|r| r.name()).collect::<Vec<_>>())?;
    Ok(())
}
