//! Python bindings. Reports cross the boundary as plain dicts and lists
//! built from their canonical JSON form.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use amcr_core::attention::build_soft_mask;
use amcr_core::backends::{
    canonical_json, ingest_fixture_bundle, read_attention, DeterministicTestEncoder, PlantedVocabulary, TextEncoder,
};
use amcr_core::calibration::{calibrate as calibrate_pairs, LabeledPair, OperatingPoint};
use amcr_core::detector::{detect, AggregationRule};
use amcr_core::mitigator::{toy_finetune, FinetuneStatus, FixtureSpec, MitigationConfig, MitigationFixture};
use amcr_core::numerics::{cosine as cosine_core, lse_pool as lse_core, EmbeddingVector};
use amcr_core::prompt::{parse_prompt as parse_core, reconstruct_prompt as reconstruct_core, StructuredPrompt};
use amcr_core::risk::{load_corpus, rank_slots, RiskCorpus};
use amcr_core::sanitizer::{sanitize as sanitize_core, Providers, SanitizerConfig};

create_exception!(amcr, AmcrError, PyException);

fn fail(e: amcr_core::Error) -> PyErr {
    AmcrError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = canonical_json(value).map_err(fail)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| AmcrError::new_err(e.to_string()))
}

/// Seeded hermetic text encoder with the planted fixture vocabulary.
#[pyclass(name = "TestEncoder", frozen)]
struct PyTestEncoder {
    inner: DeterministicTestEncoder,
}

#[pymethods]
impl PyTestEncoder {
    #[new]
    #[pyo3(signature = (seed = 0, dim = 64))]
    fn new(seed: u64, dim: usize) -> PyResult<Self> {
        let vocab = PlantedVocabulary::builtin().clone();
        Ok(Self {
            inner: DeterministicTestEncoder::with_vocabulary(seed, dim, vocab).map_err(fail)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let vectors = self.inner.embed(&refs).map_err(|e| fail(e.into()))?;
        Ok(vectors.into_iter().map(EmbeddingVector::into_inner).collect())
    }
}

/// Embedded store of protected phrases.
#[pyclass(name = "RiskCorpus", frozen)]
struct PyRiskCorpus {
    inner: RiskCorpus,
}

#[pymethods]
impl PyRiskCorpus {
    /// Loads a line-delimited corpus file.
    #[staticmethod]
    fn load(path: PathBuf, encoder: &PyTestEncoder) -> PyResult<Self> {
        Ok(Self {
            inner: load_corpus(&path, &encoder.inner).map_err(fail)?,
        })
    }

    #[staticmethod]
    fn from_phrases(phrases: Vec<String>, encoder: &PyTestEncoder) -> PyResult<Self> {
        let pairs: Vec<(String, Option<String>)> = phrases.into_iter().map(|p| (p, None)).collect();
        Ok(Self {
            inner: RiskCorpus::from_phrases(&pairs, &encoder.inner).map_err(fail)?,
        })
    }

    fn phrases(&self) -> Vec<String> {
        self.inner.entries().iter().map(|e| e.phrase.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Splits a prompt into slots.
#[pyfunction]
fn parse_prompt<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &parse_core(text).map_err(fail)?)
}

/// Flattens a slot dict back into a prompt string.
#[pyfunction]
fn reconstruct_prompt(py: Python<'_>, slots: &Bound<'_, PyAny>) -> PyResult<String> {
    let sp: StructuredPrompt = from_py(py, slots)?;
    reconstruct_core(&sp).map_err(fail)
}

/// Per-phrase and per-slot risk of a prompt.
#[pyfunction]
fn score_prompt<'py>(
    py: Python<'py>,
    prompt: &str,
    corpus: &PyRiskCorpus,
    encoder: &PyTestEncoder,
) -> PyResult<Bound<'py, PyAny>> {
    let sp = parse_core(prompt).map_err(fail)?;
    to_py(py, &rank_slots(&sp, &corpus.inner, &encoder.inner).map_err(fail)?)
}

/// Iterative prompt sanitization with the built-in replacement table.
#[pyfunction]
#[pyo3(signature = (prompt, corpus, encoder, lambda_ = 0.5, budget = 5, gamma = 0.02, window_m = 3, risk_quantile = 0.5, candidates_per_element = 4))]
#[allow(clippy::too_many_arguments)]
fn sanitize<'py>(
    py: Python<'py>,
    prompt: &str,
    corpus: &PyRiskCorpus,
    encoder: &PyTestEncoder,
    lambda_: f64,
    budget: usize,
    gamma: f64,
    window_m: usize,
    risk_quantile: f64,
    candidates_per_element: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = SanitizerConfig {
        lambda: lambda_,
        budget,
        gamma,
        window_m,
        risk_quantile,
        candidates_per_element,
    };
    let sp = parse_core(prompt).map_err(fail)?;
    let result = sanitize_core(&sp, &corpus.inner, &encoder.inner, &Providers::fallback_only(), &cfg).map_err(fail)?;
    to_py(py, &result)
}

/// Soft mask of an attention container, as rows of values in [0, 1].
#[pyfunction]
#[pyo3(signature = (path, tokens = None, layer_weights = None))]
fn soft_mask(path: PathBuf, tokens: Option<Vec<usize>>, layer_weights: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let stack = read_attention(&path).map_err(fail)?;
    let mask = build_soft_mask(&stack, layer_weights.as_deref(), tokens.as_deref()).map_err(fail)?;
    let w = mask.field.width();
    Ok(mask.field.values().chunks(w).map(<[f64]>::to_vec).collect())
}

/// Partial-infringement detection on a fixture bundle directory.
#[pyfunction]
#[pyo3(signature = (bundle, beta = 20.0, tau = 0.9, rule = "weighted_mean", pi = None))]
fn detect_bundle<'py>(
    py: Python<'py>,
    bundle: PathBuf,
    beta: f64,
    tau: f64,
    rule: &str,
    pi: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let rule: AggregationRule = rule.parse().map_err(fail)?;
    let encoder = DeterministicTestEncoder::new(0);
    let b = ingest_fixture_bundle(&bundle, &encoder).map_err(fail)?;
    let (gen, reference) = b.detector_inputs().map_err(fail)?;
    to_py(py, &detect(&gen, &reference, pi.as_deref(), beta, tau, rule).map_err(fail)?)
}

/// Threshold maximizing F1 over labeled scores.
#[pyfunction]
#[pyo3(signature = (scores, labels, min_precision = None))]
fn calibrate<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<bool>,
    min_precision: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    if scores.len() != labels.len() {
        return Err(AmcrError::new_err("scores and labels differ in length"));
    }
    let pairs: Vec<LabeledPair> = scores
        .into_iter()
        .zip(labels)
        .map(|(score, infringing)| LabeledPair { score, infringing })
        .collect();
    let point = min_precision.map_or(OperatingPoint::MaxF1, OperatingPoint::MinPrecision);
    to_py(py, &calibrate_pairs(&pairs, point).map_err(fail)?)
}

/// Toy mitigation fine-tuning. Uses the bundle's latents and masks when
/// given, otherwise the synthetic infringing-reference fixture.
#[pyfunction]
#[pyo3(signature = (bundle = None, steps = 200, lr = 1e-2, lambda_r = 1.0, lambda_a = 0.1, beta = 20.0))]
fn finetune<'py>(
    py: Python<'py>,
    bundle: Option<PathBuf>,
    steps: usize,
    lr: f64,
    lambda_r: f64,
    lambda_a: f64,
    beta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let fixture = match bundle {
        Some(dir) => {
            let encoder = DeterministicTestEncoder::new(0);
            ingest_fixture_bundle(&dir, &encoder)
                .and_then(|b| b.mitigation_fixture())
                .map_err(fail)?
        }
        None => MitigationFixture::infringing_reference(FixtureSpec::default()).map_err(fail)?,
    };
    let cfg = MitigationConfig {
        lambda_r,
        lambda_a,
        beta,
        ..MitigationConfig::default()
    };
    let run = py
        .detach(|| toy_finetune(&fixture.initial_predictor(), &fixture, &cfg, steps, lr))
        .map_err(fail)?;
    if let FinetuneStatus::Diverged { iter } = run.status {
        return Err(AmcrError::new_err(format!("fine-tuning diverged at iteration {iter}")));
    }
    to_py(py, &run.reports)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = EmbeddingVector::new(a).map_err(fail)?;
    let b = EmbeddingVector::new(b).map_err(fail)?;
    cosine_core(&a, &b).map_err(fail)
}

#[pyfunction]
fn lse_pool(sims: Vec<f64>, beta: f64) -> PyResult<f64> {
    lse_core(&sims, beta).map_err(fail)
}

#[pymodule]
fn amcr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AmcrError", m.py().get_type::<AmcrError>())?;
    m.add_class::<PyTestEncoder>()?;
    m.add_class::<PyRiskCorpus>()?;
    m.add_function(wrap_pyfunction!(parse_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(score_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(sanitize, m)?)?;
    m.add_function(wrap_pyfunction!(soft_mask, m)?)?;
    m.add_function(wrap_pyfunction!(detect_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(lse_pool, m)?)?;
    Ok(())
}
