//! Python bindings: questions, the confidence estimator, metrics and the
//! scoring/evaluation runner.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use ::expconf as core;
use core::backend::Backend;
use core::methods::{ConfidenceResult, Estimator};
use core::metrics::{self, EvalOptions};
use core::runner::{self, BackendKind, RunConfig};
use core::{AnswerDistribution, Label, MethodConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (core::Error::InvalidInput(_)
        | core::Error::Validation(_)
        | core::Error::Dataset { .. }
        | core::Error::TiesPresent
        | core::Error::UndefinedAuroc
        | core::Error::DegenerateWeights(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| err(e.into()))?;
    to_py(py, &v)
}

fn label(s: &str) -> PyResult<Label> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Label::new(c).map_err(err),
        _ => Err(PyValueError::new_err(format!("label must be one letter, got {s:?}"))),
    }
}

fn dist_to_map(d: &AnswerDistribution) -> BTreeMap<String, f64> {
    d.iter().map(|(l, p)| (l.to_string(), p)).collect()
}

fn pairs(confidences: Vec<f64>, correct: Vec<bool>) -> PyResult<Vec<(f64, bool)>> {
    if confidences.len() != correct.len() {
        return Err(PyValueError::new_err(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    Ok(confidences.into_iter().zip(correct).collect())
}

/// A multiple-choice question; options are labelled A, B, ... in order.
#[pyclass(name = "Question", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyQuestion(core::Question);

#[pymethods]
impl PyQuestion {
    #[new]
    fn new(id: &str, stem: &str, options: Vec<String>, gold: &str) -> PyResult<Self> {
        let refs: Vec<&str> = options.iter().map(String::as_str).collect();
        core::Question::new(id, stem, &refs, label(gold)?).map(PyQuestion).map_err(err)
    }

    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }

    #[getter]
    fn stem(&self) -> &str {
        &self.0.stem
    }

    #[getter]
    fn options(&self) -> Vec<String> {
        self.0.options.iter().map(|o| o.text.clone()).collect()
    }

    #[getter]
    fn gold(&self) -> String {
        self.0.gold.to_string()
    }

    fn labels(&self) -> Vec<String> {
        self.0.labels().iter().map(Label::to_string).collect()
    }

    fn __repr__(&self) -> String {
        format!("Question(id={:?}, options={}, gold={})", self.0.id, self.0.options.len(), self.0.gold)
    }
}

/// Output of one estimate.
#[pyclass(name = "ConfidenceResult", frozen)]
struct PyConfidenceResult(ConfidenceResult);

#[pymethods]
impl PyConfidenceResult {
    #[getter]
    fn distribution(&self) -> BTreeMap<String, f64> {
        dist_to_map(&self.0.distribution)
    }

    #[getter]
    fn predicted(&self) -> String {
        self.0.predicted.to_string()
    }

    #[getter]
    fn confidence(&self) -> f64 {
        self.0.confidence
    }

    #[getter]
    fn samples_used(&self) -> usize {
        self.0.samples_used
    }

    #[getter]
    fn parse_failures(&self) -> usize {
        self.0.parse_failures
    }

    #[getter]
    fn explanations(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.0.explanations)
    }

    #[getter]
    fn metadata(&self) -> BTreeMap<String, String> {
        self.0.metadata.clone()
    }

    fn __repr__(&self) -> String {
        format!("ConfidenceResult(predicted={}, confidence={:.4})", self.0.predicted, self.0.confidence)
    }
}

fn method_config(
    method: &str,
    n_samples: usize,
    k: usize,
    temperature: f64,
    plausibility: &str,
    position: &str,
) -> PyResult<MethodConfig> {
    let mut cfg = MethodConfig::new(method.parse().map_err(err)?);
    cfg.n_samples = n_samples;
    cfg.k = k;
    cfg.temperature_explain = temperature;
    cfg.plausibility = plausibility.parse().map_err(err)?;
    cfg.explanation_position = position.parse().map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn backend_kind(fixture: &Option<PathBuf>) -> BackendKind {
    if fixture.is_some() {
        BackendKind::Mock
    } else {
        BackendKind::OpenaiCompatible
    }
}

/// Confidence estimator. With `fixture` set it replays a mock fixture file;
/// otherwise it calls the endpoint configured by `CONF_API_KEY` and
/// `CONF_BASE_URL`.
#[pyclass(name = "Estimator", frozen)]
struct PyEstimator(Estimator<Arc<dyn Backend>>);

#[pymethods]
impl PyEstimator {
    #[new]
    #[pyo3(signature = (
        method = "stability", *, fixture = None, model = "gpt-4o-mini", n_samples = 5, k = 5,
        temperature = 0.7, plausibility = "entailment", position = "pre", cache_dir = None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        method: &str,
        fixture: Option<PathBuf>,
        model: &str,
        n_samples: usize,
        k: usize,
        temperature: f64,
        plausibility: &str,
        position: &str,
        cache_dir: Option<PathBuf>,
    ) -> PyResult<Self> {
        let cfg = method_config(method, n_samples, k, temperature, plausibility, position)?;
        let mut run = RunConfig::new("", "", cfg.clone());
        run.backend = backend_kind(&fixture);
        run.fixture_path = fixture;
        run.cache_dir = cache_dir;
        let backend = run.build_backend(false).map_err(err)?;
        Estimator::new(backend, model, cfg).map(PyEstimator).map_err(err)
    }

    fn estimate(&self, py: Python<'_>, question: &PyQuestion) -> PyResult<PyConfidenceResult> {
        let q = question.0.clone();
        py.detach(|| self.0.estimate(&q)).map(PyConfidenceResult).map_err(err)
    }
}

/// Weighted mixture of answer distributions; returns the mixture and whether
/// the weights were degenerate (uniform fallback).
#[pyfunction]
fn marginalize(weights: Vec<f64>, distributions: Vec<BTreeMap<String, f64>>) -> PyResult<(BTreeMap<String, f64>, bool)> {
    let dists = distributions
        .into_iter()
        .map(|m| {
            let probs = m.iter().map(|(l, p)| Ok((label(l)?, *p))).collect::<PyResult<_>>()?;
            AnswerDistribution::new(probs).map_err(err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let (mix, degenerate) = core::methods::marginalize(&weights, &dists).map_err(err)?;
    Ok((dist_to_map(&mix), degenerate))
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PyQuestion>> {
    Ok(runner::load_dataset(path).map_err(err)?.questions.into_iter().map(PyQuestion).collect())
}

#[pyfunction]
#[pyo3(signature = (confidences, correct, bins = 10))]
fn ece(confidences: Vec<f64>, correct: Vec<bool>, bins: usize) -> PyResult<f64> {
    metrics::ece(&pairs(confidences, correct)?, bins).map_err(err)
}

#[pyfunction]
fn aurc(confidences: Vec<f64>, correct: Vec<bool>) -> PyResult<f64> {
    metrics::aurc(&pairs(confidences, correct)?).map_err(err)
}

#[pyfunction]
fn auroc(confidences: Vec<f64>, correct: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&pairs(confidences, correct)?).map_err(err)
}

/// Full evaluation summary (accuracy, ECE, noise-averaged AURC and AUROC,
/// per-bin statistics) as a dict.
#[pyfunction]
#[pyo3(signature = (confidences, correct, bins = 10, noise_sigma = 1e-6, noise_repeats = 10, seed = 0))]
fn summarize(
    py: Python<'_>,
    confidences: Vec<f64>,
    correct: Vec<bool>,
    bins: usize,
    noise_sigma: f64,
    noise_repeats: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let opts = EvalOptions {
        bins,
        sigma: noise_sigma,
        repeats: noise_repeats,
        seed,
    };
    let summary = metrics::summarize(&pairs(confidences, correct)?, &opts).map_err(err)?;
    serialize(py, &summary)
}

/// Scores a JSONL dataset into a records file, resuming if it exists.
#[pyfunction]
#[pyo3(signature = (
    dataset, out, method = "stability", *, fixture = None, model = "gpt-4o-mini", n_samples = 5,
    k = 5, temperature = 0.7, plausibility = "entailment", position = "pre", seed = 0,
    limit = Some(runner::DEFAULT_LIMIT), cache_dir = None, concurrency = runner::DEFAULT_CONCURRENCY
))]
#[allow(clippy::too_many_arguments)]
fn score(
    py: Python<'_>,
    dataset: PathBuf,
    out: PathBuf,
    method: &str,
    fixture: Option<PathBuf>,
    model: &str,
    n_samples: usize,
    k: usize,
    temperature: f64,
    plausibility: &str,
    position: &str,
    seed: u64,
    limit: Option<usize>,
    cache_dir: Option<PathBuf>,
    concurrency: usize,
) -> PyResult<Py<PyAny>> {
    let mut cfg = RunConfig::new(dataset, out, method_config(method, n_samples, k, temperature, plausibility, position)?);
    cfg.backend = backend_kind(&fixture);
    cfg.fixture_path = fixture;
    cfg.model = model.into();
    cfg.seed = seed;
    cfg.limit = limit;
    cfg.cache_dir = cache_dir;
    cfg.concurrency = concurrency;
    let outcome = py.detach(|| runner::run(&cfg)).map_err(err)?;
    let summary = serde_json::json!({
        "resumed": outcome.resumed,
        "scored": outcome.scored,
        "failed": outcome.failed,
    });
    to_py(py, &summary)
}

/// Evaluates a records file; returns the summary dict including `failed`.
#[pyfunction]
#[pyo3(signature = (records, bins = 10, noise_sigma = 1e-6, noise_repeats = 10, seed = 0))]
fn evaluate(
    py: Python<'_>,
    records: PathBuf,
    bins: usize,
    noise_sigma: f64,
    noise_repeats: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let opts = EvalOptions {
        bins,
        sigma: noise_sigma,
        repeats: noise_repeats,
        seed,
    };
    let report = runner::evaluate(records, &opts).map_err(err)?;
    serialize(py, &report)
}

#[pymodule]
fn expconf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuestion>()?;
    m.add_class::<PyConfidenceResult>()?;
    m.add_class::<PyEstimator>()?;
    m.add_function(wrap_pyfunction!(marginalize, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(aurc, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("METHODS", core::MethodKind::ALL.map(|m| m.as_str()).to_vec())?;
    Ok(())
}
