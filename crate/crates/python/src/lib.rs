//! Python bindings for the prompt-optimization engine.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use reprompt::prompt::{diff_prompts, PromptDocument, SegmentationConfig, Segmenter};
use reprompt::toy::{self, ToySample};

create_exception!(reprompt_py, PromptError, PyException);
create_exception!(reprompt_py, RunError, PyException);

fn segmenter(segmentation_toml: Option<&str>) -> PyResult<Segmenter> {
    let cfg: SegmentationConfig = match segmentation_toml {
        Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SegmentationConfig::default(),
    };
    cfg.compile().map_err(|e| PromptError::new_err(e.to_string()))
}

/// A prompt split into segments whose texts concatenate to the original.
#[pyclass(name = "Prompt", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPrompt {
    doc: PromptDocument,
}

#[pymethods]
impl PyPrompt {
    /// Parses `text`; `segmentation` is an optional TOML table of boundary
    /// patterns.
    #[staticmethod]
    #[pyo3(signature = (text, segmentation = None))]
    fn parse(text: &str, segmentation: Option<&str>) -> PyResult<Self> {
        let doc = segmenter(segmentation)?
            .parse(text)
            .map_err(|e| PromptError::new_err(e.to_string()))?;
        Ok(Self { doc })
    }

    fn render(&self) -> String {
        self.doc.render()
    }

    /// `(kind, text)` pairs in order.
    fn segments(&self) -> Vec<(String, String)> {
        self.doc
            .segments()
            .iter()
            .map(|s| (s.kind().as_str().to_string(), s.text().to_string()))
            .collect()
    }

    fn has_step_instructions(&self) -> bool {
        self.doc.has_step_instructions()
    }

    /// Step texts without their numbers.
    fn steps(&self) -> Vec<String> {
        self.doc
            .steps()
            .map(|l| l.steps.into_iter().map(|s| s.text).collect())
            .unwrap_or_default()
    }

    /// A copy with the step-instruction segment replaced by `text`.
    fn replace_steps(&self, text: &str) -> PyResult<Self> {
        self.doc
            .replace_step_text(text)
            .map(|doc| Self { doc })
            .ok_or_else(|| PromptError::new_err("prompt has no step instructions"))
    }

    fn __str__(&self) -> String {
        self.doc.render()
    }

    fn __repr__(&self) -> String {
        let kinds: Vec<&str> = self.doc.segments().iter().map(|s| s.kind().as_str()).collect();
        format!("Prompt([{}])", kinds.join(", "))
    }
}

/// Structured difference between two prompts as `(kind, status, edits)`
/// triples.
#[pyfunction]
fn diff(old: &PyPrompt, new: &PyPrompt) -> Vec<(String, String, Vec<String>)> {
    diff_prompts(&old.doc, &new.doc)
        .entries
        .into_iter()
        .map(|e| {
            let status = serde_json::to_value(e.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default();
            (
                e.kind.as_str().to_string(),
                status,
                e.step_edits.iter().map(|s| s.to_string()).collect(),
            )
        })
        .collect()
}

/// Byte spans of placeholder text such as `<Examples from the original prompt>`.
#[pyfunction]
fn detect_placeholders(text: &str) -> Vec<(usize, usize)> {
    reprompt::guardrails::detect_placeholders(text)
        .into_iter()
        .map(|r| (r.start, r.end))
        .collect()
}

/// `(case, focus text)` from a summarizer output.
#[pyfunction]
fn parse_conclusion(raw: &str) -> PyResult<(String, String)> {
    let c = reprompt::summarizer::parse_conclusion(raw).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let case = serde_json::to_value(c.case)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    Ok((case, c.text))
}

/// The prompt after the last final-prompt marker of an optimizer output.
#[pyfunction]
fn parse_final_prompt(raw: &str) -> PyResult<String> {
    reprompt::optimizer::parse_final_prompt(raw).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A generated trip of the built-in toy task.
#[pyclass(name = "ToySample", frozen)]
struct PyToySample {
    inner: ToySample,
}

#[pymethods]
impl PyToySample {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn days(&self) -> usize {
        self.inner.days
    }

    #[getter]
    fn budget(&self) -> u32 {
        self.inner.budget
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }

    /// `(pass, violated rule ids)` for an answer text; unreadable answers
    /// raise ValueError.
    fn check(&self, answer: &str) -> PyResult<(bool, Vec<String>)> {
        let parsed = toy::parse_toy_answer(answer, &self.inner).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let c = toy::toy_check(&parsed, &self.inner);
        Ok((c.pass, c.violated.iter().map(|r| r.id().to_string()).collect()))
    }

    /// Number of plans that satisfy every rule.
    fn feasible_count(&self) -> usize {
        self.inner.feasible_plans().len()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner.to_task_sample()).expect("sample serializes")
    }

    fn __repr__(&self) -> String {
        format!("ToySample(id={:?}, days={}, budget={})", self.inner.id, self.inner.days, self.inner.budget)
    }
}

#[pyfunction]
#[pyo3(signature = (seed, count, prefix = "toy"))]
fn toy_samples(seed: u64, count: usize, prefix: &str) -> Vec<PyToySample> {
    toy::generate_toy_samples(seed, count, prefix)
        .into_iter()
        .map(|inner| PyToySample { inner })
        .collect()
}

/// One prompt version of a run directory.
#[pyclass(name = "Version", frozen, get_all)]
struct PyVersion {
    version: u32,
    hash: String,
    placement: Option<String>,
    focus_text: String,
    prompt: String,
}

#[pymethods]
impl PyVersion {
    fn __repr__(&self) -> String {
        format!("Version({}, {})", self.version, self.placement.as_deref().unwrap_or("-"))
    }
}

/// Loads and verifies a run directory and returns its prompt versions.
#[pyfunction]
fn load_run(run_dir: PathBuf) -> PyResult<Vec<PyVersion>> {
    let snap = reprompt::trainer::load_run(&run_dir).map_err(|e| RunError::new_err(e.to_string()))?;
    Ok(snap
        .versions
        .into_iter()
        .map(|(r, doc)| PyVersion {
            version: r.version,
            hash: r.hash,
            placement: r.placement.map(|p| p.to_string()),
            focus_text: r.focus_text,
            prompt: doc.render(),
        })
        .collect())
}

/// Runs the command-line tool in-process; returns `(exit code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = reprompt::cli::run(
            std::iter::once("reprompt".to_string()).chain(args),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8_lossy(&out).into_owned(),
            String::from_utf8_lossy(&err).into_owned(),
        )
    })
}

#[pymodule]
fn reprompt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPrompt>()?;
    m.add_class::<PyToySample>()?;
    m.add_class::<PyVersion>()?;
    m.add_function(wrap_pyfunction!(diff, m)?)?;
    m.add_function(wrap_pyfunction!(detect_placeholders, m)?)?;
    m.add_function(wrap_pyfunction!(parse_conclusion, m)?)?;
    m.add_function(wrap_pyfunction!(parse_final_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(toy_samples, m)?)?;
    m.add_function(wrap_pyfunction!(load_run, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("PromptError", m.py().get_type::<PromptError>())?;
    m.add("RunError", m.py().get_type::<RunError>())?;
    Ok(())
}
