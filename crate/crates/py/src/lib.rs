//! Python bindings: configuration, data generation, the training and
//! evaluation commands, direct generation from a model, and the metrics.

use mmict::cli;
use mmict::config::RunConfig;
use mmict::data::{self, GenSpec, Task};
use mmict::demo::{self, DemoVariant, Episode};
use mmict::eval;
use mmict::model::Model;
use mmict::tokenizer::Tokenizer;
use mmict::train::Schedule;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(pymmict, MmictError, PyException);

fn err(e: mmict::Error) -> PyErr {
    MmictError::new_err(e.to_string())
}

/// Flat run configuration; keys match the command-line `--set` keys.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (overrides = Vec::new()))]
    fn new(overrides: Vec<String>) -> PyResult<Self> {
        RunConfig::load(None, &overrides).map(|inner| Self { inner }).map_err(err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)?;
        self.inner.validate().map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| MmictError::new_err(format!("unknown key {key:?}")))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.inner.entries() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        self.inner.to_text()
    }
}

#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: data::Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    #[getter]
    fn group_id(&self) -> u64 {
        self.inner.group_id
    }

    #[getter]
    fn text(&self) -> &str {
        &self.inner.text
    }

    #[getter]
    fn label(&self) -> &str {
        &self.inner.label
    }

    #[getter]
    fn question(&self) -> Option<&str> {
        self.inner.question.as_deref()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames.len()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={}, label={:?})", self.inner.id, self.inner.label)
    }
}

fn samples(list: &[PySample]) -> Vec<data::Sample> {
    list.iter().map(|s| s.inner.clone()).collect()
}

/// A hub around the frozen backbones.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Model,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Fresh hub around the configured language model checkpoint.
    #[staticmethod]
    fn fresh(config: &PyConfig) -> PyResult<Self> {
        let lm = cli::load_lm(&config.inner).map_err(err)?;
        let inner = cli::fresh_model(&config.inner, lm).map_err(err)?;
        Ok(Self { inner, config: config.inner.clone() })
    }

    /// Loads the configured checkpoint.
    #[staticmethod]
    fn load(config: &PyConfig) -> PyResult<Self> {
        let inner = cli::load_model(&config.inner).map_err(err)?;
        Ok(Self { inner, config: config.inner.clone() })
    }

    fn backbone_digest(&self) -> String {
        self.inner.backbone_digest()
    }

    fn trainable_digest(&self) -> String {
        self.inner.trainable_digest()
    }

    /// Decodes an answer for `query` with the configured variant and
    /// generation settings.
    #[pyo3(signature = (query, demos = Vec::new(), with_demos = None, instruction = None))]
    fn generate(
        &self,
        query: PySample,
        demos: Vec<PySample>,
        with_demos: Option<bool>,
        instruction: Option<String>,
    ) -> PyResult<String> {
        let episode = self.episode(query, demos, instruction)?;
        let with_demos = with_demos.unwrap_or(self.config.with_demos);
        eval::generate(&self.inner, &episode, self.config.variant, with_demos, &self.config.gen).map_err(err)
    }

    /// `(symbol, role, rows)` for each segment of the training context.
    #[pyo3(signature = (query, demos, variant = None))]
    fn layout(&self, query: PySample, demos: Vec<PySample>, variant: Option<&str>) -> PyResult<Vec<(String, String, usize)>> {
        let variant: DemoVariant = match variant {
            Some(v) => v.parse().map_err(err)?,
            None => self.config.variant,
        };
        let episode = self.episode(query, demos, None)?;
        let plan = demo::plan_context(&self.inner, &episode, variant, true).map_err(err)?;
        Ok(plan
            .layout()
            .into_iter()
            .map(|(f, r, rows)| (f.symbol().to_string(), format!("{r:?}"), rows))
            .collect())
    }
}

impl PyModel {
    fn episode(&self, query: PySample, demos: Vec<PySample>, instruction: Option<String>) -> PyResult<Episode> {
        let instruction = instruction.unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.eval_seed);
            demo::pick_instruction(self.config.task, &query.inner, &mut rng)
        });
        Episode::new(samples(&demos), query.inner, instruction).map_err(err)
    }
}

/// Generates splits in memory: `{"train": [...], "val": [...], "test": [...]}`.
#[pyfunction]
#[pyo3(signature = (task, train, val, test, frames = 16, grid = 4, seed = 0))]
fn generate_data(task: &str, train: usize, val: usize, test: usize, frames: usize, grid: usize, seed: u64) -> PyResult<Vec<(String, Vec<PySample>)>> {
    let task: Task = task.parse().map_err(err)?;
    let splits = data::generate(&GenSpec { task, train, val, test, frames, grid, seed }).map_err(err)?;
    let wrap = |v: Vec<data::Sample>| v.into_iter().map(|inner| PySample { inner }).collect();
    Ok(vec![
        ("train".into(), wrap(splits.train)),
        ("val".into(), wrap(splits.val)),
        ("test".into(), wrap(splits.test)),
    ])
}

/// Writes the configured task's splits to `data_dir`.
#[pyfunction]
fn gen_data(config: &PyConfig) -> PyResult<String> {
    cli::gen_data(&config.inner).map_err(err)
}

/// Pre-trains the language model on every generated task and saves it.
#[pyfunction]
fn pretrain_lm(config: &PyConfig) -> PyResult<String> {
    cli::pretrain_lm(&config.inner).map_err(err)
}

/// Trains the hub, writing the checkpoint and training log.
#[pyfunction]
fn train(config: &PyConfig) -> PyResult<PyModel> {
    let (inner, _) = cli::train_cmd(&config.inner).map_err(err)?;
    Ok(PyModel { inner, config: config.inner.clone() })
}

/// Evaluates `model` on the configured split; returns metrics and the
/// per-sample records.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, config: &PyConfig, model: &PyModel) -> PyResult<Bound<'py, PyDict>> {
    let report = cli::evaluate_model(&config.inner, &model.inner).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("accuracy", report.metrics.accuracy)?;
    out.set_item("bleu4", report.metrics.bleu4)?;
    let records = report
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("id", r.id)?;
            d.set_item("prediction", &r.prediction)?;
            d.set_item("label", &r.label)?;
            d.set_item("correct", r.correct == 1)?;
            d.set_item("demos", &r.demos)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("records", records)?;
    Ok(out)
}

#[pyfunction]
fn bleu4(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<f64> {
    eval::bleu4(&candidates, &references).map_err(err)
}

#[pyfunction]
fn exact_match(prediction: &str, label: &str) -> bool {
    eval::exact_match(prediction, label) == 1
}

#[pyfunction]
fn tokenize(text: &str) -> PyResult<Vec<usize>> {
    Tokenizer::new().tokenize(text).map_err(err)
}

#[pyfunction]
fn detokenize(ids: Vec<usize>) -> String {
    Tokenizer::new().detokenize(&ids)
}

/// Learning rate of the configured schedule at `step` of `total_steps`.
#[pyfunction]
fn lr_at(config: &PyConfig, total_steps: usize, step: usize) -> PyResult<f64> {
    Ok(Schedule::new(&config.inner.train, total_steps).map_err(err)?.lr_at(step))
}

#[pymodule]
fn pymmict(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MmictError", m.py().get_type::<MmictError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_lm, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    Ok(())
}
