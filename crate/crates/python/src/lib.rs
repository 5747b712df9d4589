//! Python bindings for the stancechain library.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use stancechain::corpus::{load_corpus as load, ColumnMap};
use stancechain::llmio::{MockFixtures, MockProvider, ResponseCache};
use stancechain::metrics::evaluate as score;
use stancechain::outparse;
use stancechain::prompt::{render_step1, render_step2, render_step3, GenerationConfig, TemplateSet};
use stancechain::{ChainConfig, Dataset, Pipeline as CorePipeline, Providers, StanceLabel, StanceSample};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn dataset(name: &str) -> PyResult<Dataset> {
    match name {
        "sem16" => Ok(Dataset::Sem16),
        "vast" => Ok(Dataset::Vast),
        "custom" => Ok(Dataset::Custom),
        other => Err(value_err(format!("unknown dataset {other:?}"))),
    }
}

/// Label vocabulary for one dataset.
#[pyclass(frozen)]
struct LabelScheme {
    inner: stancechain::LabelScheme,
}

#[pymethods]
impl LabelScheme {
    #[staticmethod]
    fn sem16() -> Self {
        LabelScheme { inner: stancechain::LabelScheme::sem16() }
    }

    #[staticmethod]
    fn vast() -> Self {
        LabelScheme { inner: stancechain::LabelScheme::vast() }
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    /// Canonical label (`favor`, `against` or `neutral`) for a surface form.
    fn normalize(&self, raw: &str) -> PyResult<&'static str> {
        self.inner.normalize(raw).map(StanceLabel::as_str).map_err(value_err)
    }

    fn render_choices(&self) -> String {
        self.inner.render_choices()
    }

    fn __repr__(&self) -> String {
        format!("LabelScheme({:?})", self.inner.name())
    }
}

fn scheme_or_default(scheme: Option<&LabelScheme>) -> stancechain::LabelScheme {
    scheme.map(|s| s.inner.clone()).unwrap_or_else(stancechain::LabelScheme::sem16)
}

fn label(raw: &str) -> PyResult<StanceLabel> {
    stancechain::LabelScheme::sem16().normalize(raw).map_err(value_err)
}

/// True when the judgment asks for background knowledge.
#[pyfunction]
#[pyo3(signature = (raw, yes_means_sufficient = true))]
fn parse_judgment(raw: &str, yes_means_sufficient: bool) -> PyResult<bool> {
    outparse::parse_judgment_with(raw, yes_means_sufficient).map(|j| j.needs_knowledge).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (raw, scheme = None))]
fn parse_step2<'py>(py: Python<'py>, raw: &str, scheme: Option<&LabelScheme>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &outparse::parse_step2(raw, &scheme_or_default(scheme)))
}

/// Returns `(reason, label)`; the reason is empty for a bare-keyword answer.
#[pyfunction]
#[pyo3(signature = (raw, scheme = None))]
fn parse_ifthen(raw: &str, scheme: Option<&LabelScheme>) -> PyResult<(String, &'static str)> {
    let rule = outparse::parse_ifthen(raw, &scheme_or_default(scheme)).map_err(value_err)?;
    Ok((rule.reason, rule.label.as_str()))
}

#[pyfunction]
fn evaluate<'py>(py: Python<'py>, golds: Vec<String>, preds: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let g = golds.iter().map(|s| label(s)).collect::<PyResult<Vec<_>>>()?;
    let p = preds.iter().map(|s| label(s)).collect::<PyResult<Vec<_>>>()?;
    to_py(py, &score(&g, &p).map_err(value_err)?)
}

/// Chat messages for one step (1, 2 or 3) using the built-in templates.
#[pyfunction]
#[pyo3(signature = (step, text, target, knowledge = None, scheme = None))]
fn render_prompt<'py>(
    py: Python<'py>,
    step: u8,
    text: &str,
    target: &str,
    knowledge: Option<&str>,
    scheme: Option<&LabelScheme>,
) -> PyResult<Bound<'py, PyAny>> {
    let sample = StanceSample::new("prompt", text, target, None).map_err(value_err)?;
    let templates = TemplateSet::default();
    let scheme = scheme_or_default(scheme);
    let gen = GenerationConfig::default();
    let request = match step {
        1 => render_step1(&sample, &templates.judge, &gen),
        2 => render_step2(&sample, &templates.query_gen, &scheme, &gen),
        3 => render_step3(&sample, knowledge, &templates.if_then, &scheme, &gen),
        _ => return Err(value_err("step must be 1, 2 or 3")),
    }
    .map_err(value_err)?;
    to_py(py, &request.messages)
}

#[pyfunction]
#[pyo3(signature = (path, dataset_name = "sem16"))]
fn load_corpus<'py>(py: Python<'py>, path: PathBuf, dataset_name: &str) -> PyResult<Bound<'py, PyAny>> {
    let ds = dataset(dataset_name)?;
    let corpus = load(&path, &ColumnMap::for_dataset(ds), ds).map_err(value_err)?;
    to_py(py, &corpus.samples)
}

/// The three-step chain driven by a scripted mock provider.
#[pyclass]
struct Pipeline {
    inner: CorePipeline,
    mock: Arc<MockProvider>,
}

#[pymethods]
impl Pipeline {
    #[staticmethod]
    #[pyo3(signature = (fixtures, max_parse_retries = 1, parallelism = 4, cache = None))]
    fn mock(fixtures: PathBuf, max_parse_retries: u32, parallelism: usize, cache: Option<PathBuf>) -> PyResult<Self> {
        let fx = MockFixtures::load(&fixtures).map_err(value_err)?;
        let mock = Arc::new(MockProvider::from_fixtures(fx).map_err(value_err)?);
        let cache = match cache {
            Some(p) => ResponseCache::open(&p).map_err(value_err)?,
            None => ResponseCache::in_memory(),
        };
        let config = ChainConfig { max_parse_retries, parallelism, ..ChainConfig::default() };
        let inner = CorePipeline::new(config, Providers::mock(mock.clone()), Arc::new(cache)).map_err(value_err)?;
        Ok(Pipeline { inner, mock })
    }

    /// Runs samples given as dicts with `id`, `text`, `target` and an
    /// optional `gold_label`; returns one trace dict per sample.
    fn run<'py>(&self, py: Python<'py>, samples: Vec<Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
        let parsed = samples
            .iter()
            .map(|s| {
                let get = |k: &str| -> PyResult<String> { s.get_item(k)?.extract() };
                let gold = match s.get_item("gold_label") {
                    Ok(v) if !v.is_none() => Some(label(&v.extract::<String>()?)?),
                    _ => None,
                };
                StanceSample::new(get("id")?, get("text")?, get("target")?, gold).map_err(value_err)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let traces = py.detach(|| self.inner.run_batch(&parsed)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        to_py(py, &traces)
    }

    /// Provider calls made so far (cache hits excluded).
    #[getter]
    fn calls(&self) -> usize {
        self.mock.calls()
    }
}

#[pymodule]
fn stancechain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LabelScheme>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(parse_judgment, m)?)?;
    m.add_function(wrap_pyfunction!(parse_step2, m)?)?;
    m.add_function(wrap_pyfunction!(parse_ifthen, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    Ok(())
}
