//! Python bindings: dataset generation, training, evaluation, Platt scaling
//! and the individual losses and metrics.

use std::path::PathBuf;

use mimu_core::calibration::{apply_platt, fit_platt, FitOptions, PlattFit, PlattParams};
use mimu_core::config::MimuConfig;
use mimu_core::losses::{self, one_hot, MaskSet};
use mimu_core::metrics;
use mimu_core::model::{forward_cached, load_checkpoint, save_checkpoint, FrozenParams, TransformerParams};
use mimu_core::synthdata::{self, audit_cooccurrence, DatasetBundle, Example};
use mimu_core::training::{self, evaluate_split, score_split, RunReport};
use mimu_core::MimuError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: MimuError) -> PyErr {
    match e {
        MimuError::Io { .. } => PyIOError::new_err(e.to_string()),
        MimuError::Diverged { .. } | MimuError::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn report_dict<'py>(py: Python<'py>, r: &RunReport) -> PyResult<Bound<'py, PyAny>> {
    json(py, &r.to_json())
}

/// A full run configuration, read from and written to TOML.
#[pyclass(name = "Config", module = "mimu", frozen)]
struct PyConfig(MimuConfig);

#[pymethods]
impl PyConfig {
    /// Defaults, or the given TOML text layered over them.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        match toml {
            Some(t) => MimuConfig::from_toml_str(t).map(PyConfig).map_err(err),
            None => Ok(PyConfig(MimuConfig::default())),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        MimuConfig::load(&path).map(PyConfig).map_err(err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, hash={})", self.0.seed, &self.0.hash()[..12])
    }
}

/// Generated train, dev and OOD splits.
#[pyclass(name = "Bundle", module = "mimu", frozen)]
struct PyBundle(DatasetBundle);

impl PyBundle {
    fn split(&self, name: &str) -> PyResult<&[Example]> {
        if name == "train" {
            return Ok(&self.0.train);
        }
        self.0
            .eval_splits()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| PyValueError::new_err(format!("no split named `{name}`")))
    }
}

#[pymethods]
impl PyBundle {
    /// Generates the bundle described by `config.data`, seeded by
    /// `seed` or the config seed.
    #[staticmethod]
    #[pyo3(signature = (config, seed = None))]
    fn generate(config: &PyConfig, seed: Option<u64>) -> PyResult<Self> {
        synthdata::generate(&config.0.data, seed.unwrap_or(config.0.seed))
            .map(PyBundle)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        synthdata::load_bundle(&path).map(|(b, _)| PyBundle(b)).map_err(err)
    }

    /// Writes the bundle and returns its content hash.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        synthdata::save_bundle(&self.0, &path).map(|m| m.bundle_hash).map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        synthdata::bundle_hash(&self.0).map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.meta.num_classes
    }

    /// `train`, `dev`, then the OOD variants.
    fn splits(&self) -> Vec<String> {
        std::iter::once("train".to_string())
            .chain(self.0.eval_splits().into_iter().map(|(n, _)| n.to_string()))
            .collect()
    }

    fn labels(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.split(split)?.iter().map(|e| e.label).collect())
    }

    /// Fraction of examples whose cue matches the label, keyed by
    /// `(shortcut, split)`.
    fn audit<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let out = PyDict::new(py);
        for s in &self.0.meta.shortcuts {
            for name in self.splits() {
                let a = audit_cooccurrence(self.split(&name)?, s).map_err(err)?;
                out.set_item((s.label(), name), a)?;
            }
        }
        Ok(out)
    }

    fn __len__(&self) -> usize {
        self.0.train.len()
    }
}

/// Trained transformer weights.
#[pyclass(name = "Model", module = "mimu", frozen)]
struct PyModel(TransformerParams<f32>);

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (dir, stem = "model"))]
    fn load(dir: PathBuf, stem: &str) -> PyResult<Self> {
        load_checkpoint(&dir, stem).map(PyModel).map_err(err)
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    #[pyo3(signature = (dir, stem = "model"))]
    fn save(&self, dir: PathBuf, stem: &str) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(|e| err(MimuError::io(&dir, e)))?;
        save_checkpoint(&self.0, &dir, stem).map(|_| ()).map_err(err)
    }

    /// Accuracy and ECE on one split, optionally through Platt scaling.
    #[pyo3(signature = (bundle, split, platt = None, bins = 15))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        bundle: &PyBundle,
        split: &str,
        platt: Option<&PyPlatt>,
        bins: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let m = evaluate_split(&self.0, bundle.split(split)?, bins, platt.map(|p| &p.0)).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("accuracy", m.accuracy)?;
        out.set_item("ece", m.ece.ece)?;
        Ok(out)
    }

    /// Pre-softmax class scores for every example of a split.
    fn logits(&self, bundle: &PyBundle, split: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(score_split(&self.0, bundle.split(split)?).map_err(err)?.logits)
    }

    fn predict_proba(&self, bundle: &PyBundle, split: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(score_split(&self.0, bundle.split(split)?).map_err(err)?.probs)
    }

    /// Last-layer and all-layer attention vectors over input positions for
    /// one example.
    fn attention(&self, bundle: &PyBundle, split: &str, index: usize) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let ex = bundle
            .split(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("`{split}` has no example {index}")))?;
        let c = forward_cached(&self.0, &ex.features).map_err(err)?;
        let stack = c.attention(self.0.config.num_heads, self.0.config.seq_len);
        Ok((stack.source_vector().0, stack.target_vector().0))
    }
}

/// Per-class one-vs-rest logistic calibration.
#[pyclass(name = "Platt", module = "mimu", frozen)]
struct PyPlatt(PlattParams);

#[pymethods]
impl PyPlatt {
    #[new]
    fn new(a: Vec<f64>, b: Vec<f64>) -> PyResult<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(PyValueError::new_err("`a` and `b` must be non-empty and of equal length"));
        }
        Ok(PyPlatt(PlattParams { a, b }))
    }

    #[staticmethod]
    fn fit(scores: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Self> {
        fit_platt(&scores, &labels, &FitOptions::default(), "python")
            .map(|f| PyPlatt(f.params()))
            .map_err(err)
    }

    /// Normalised calibrated probabilities for one score vector.
    fn apply(&self, scores: Vec<f64>) -> PyResult<Vec<f64>> {
        apply_platt(&scores, &self.0).map_err(err)
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.0.a.clone()
    }

    #[getter]
    fn b(&self) -> Vec<f64> {
        self.0.b.clone()
    }
}

impl From<&PlattFit> for PyPlatt {
    fn from(f: &PlattFit) -> Self {
        PyPlatt(f.params())
    }
}

/// Plain supervised training. Returns the model and its report.
#[pyfunction]
fn train_erm<'py>(py: Python<'py>, bundle: &PyBundle, config: &PyConfig) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let (p, r) = py.detach(|| training::train_erm(&bundle.0, &config.0)).map_err(err)?;
    Ok((PyModel(p), report_dict(py, &r)?))
}

/// Self-calibrated source, then the self-improved target and its Platt fit.
#[pyfunction]
fn train_mimu<'py>(py: Python<'py>, bundle: &PyBundle, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let run = py.detach(|| training::train_mimu(&bundle.0, &config.0)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("source", PyModel(run.source.params().clone()))?;
    out.set_item("target", PyModel(run.target))?;
    out.set_item("platt", PyPlatt::from(&run.platt))?;
    out.set_item("source_report", report_dict(py, &run.source_report)?)?;
    out.set_item("target_report", report_dict(py, &run.target_report)?)?;
    Ok(out)
}

/// Target training against an already trained, frozen source.
#[pyfunction]
fn train_target<'py>(
    py: Python<'py>,
    bundle: &PyBundle,
    config: &PyConfig,
    source: &PyModel,
) -> PyResult<(PyModel, PyPlatt, Bound<'py, PyAny>)> {
    let frozen = FrozenParams::freeze(source.0.clone());
    let (p, platt, r) = py
        .detach(|| training::train_target(&bundle.0, &config.0, &frozen))
        .map_err(err)?;
    Ok((PyModel(p), PyPlatt::from(&platt), report_dict(py, &r)?))
}

/// The five-variant shortcut study, averaged over `seeds`.
#[pyfunction]
#[pyo3(signature = (config, seeds = vec![0], parallel = false))]
fn run_investigation<'py>(
    py: Python<'py>,
    config: &PyConfig,
    seeds: Vec<u64>,
    parallel: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let r = py
        .detach(|| training::run_investigation(&config.0, &seeds, parallel))
        .map_err(err)?;
    json(py, &r.to_json())
}

#[pyfunction]
fn calibration_loss(pred: Vec<f64>, label: usize, lambda_c: f64) -> PyResult<f64> {
    let y = one_hot::<f64>(label, pred.len());
    losses::calibration_loss(&pred, &y, lambda_c).map_err(err)
}

#[pyfunction]
fn kd_loss(target_probs: Vec<f64>, source_probs: Vec<f64>, temperature: f64) -> PyResult<f64> {
    losses::kd_loss(&target_probs, &source_probs, temperature).map_err(err)
}

#[pyfunction]
fn attention_alignment_loss(a_t: Vec<f64>, a_s: Vec<f64>, masked: Vec<usize>, top_m: usize) -> PyResult<f64> {
    let mask = MaskSet::new(masked, a_t.len()).map_err(err)?;
    losses::attention_alignment_loss(&a_t, &a_s, &mask, top_m).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (probs, labels, bins = 15))]
fn ece(probs: Vec<Vec<f64>>, labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    metrics::ece(&probs, &labels, bins).map(|r| r.ece).map_err(err)
}

#[pyfunction]
fn accuracy(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&probs, &labels).map_err(err)
}

#[pymodule]
fn mimu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyBundle>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPlatt>()?;
    m.add_function(wrap_pyfunction!(train_erm, m)?)?;
    m.add_function(wrap_pyfunction!(train_mimu, m)?)?;
    m.add_function(wrap_pyfunction!(train_target, m)?)?;
    m.add_function(wrap_pyfunction!(run_investigation, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(attention_alignment_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    Ok(())
}
