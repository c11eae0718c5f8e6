//! Python module `meningrade`. Structured values cross the boundary as JSON strings.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use meningrade_core::detectors::{ki67_index as core_ki67, Ki67Value};
use meningrade_core::eval::{pr_sweep as core_sweep, LabelRecord, ScoreRecord};
use meningrade_core::grader::{compute_grade, CriteriaSnapshot};
use meningrade_core::pipeline::cmd_process;
use meningrade_core::report::{cmd_report, render_text};
use meningrade_core::synth::{synthesize, SynthParams};
use meningrade_core::{EngineConfig, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Validation(_) | Error::Range(_) | Error::Unsupported(_) | Error::Contract(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(format!("[{}] {e}", e.code())),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Grade of a criteria snapshot; `None` grades the all-absent baseline.
#[pyfunction]
#[pyo3(signature = (snapshot_json=None))]
fn grade(snapshot_json: Option<&str>) -> PyResult<String> {
    let snap: CriteriaSnapshot = match snapshot_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => CriteriaSnapshot::baseline(),
    };
    snap.validate().map_err(py_err)?;
    serde_json::to_string(&compute_grade(&snap)).map_err(json_err)
}

/// Ki-67 index in percent, or `None` when no nuclei were counted.
#[pyfunction]
fn ki67_index(positive: u64, negative: u64) -> Option<f64> {
    match core_ki67(positive, negative) {
        Ki67Value::Percent(p) => Some(p),
        Ki67Value::NotApplicable => None,
    }
}

#[pyfunction]
fn pr_sweep(scores: Vec<(String, f64)>, labels: Vec<(String, bool)>) -> PyResult<String> {
    let pred = scores.into_iter().map(|(key, score)| ScoreRecord { key, score }).collect();
    let truth = labels.into_iter().map(|(key, label)| LabelRecord { key, label }).collect();
    serde_json::to_string(&core_sweep(pred, truth).map_err(py_err)?).map_err(json_err)
}

/// Renders a synthetic case; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, params_json=None))]
fn synth(py: Python<'_>, out: &str, params_json: Option<&str>) -> PyResult<String> {
    let params: SynthParams = match params_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => SynthParams::default(),
    };
    let out = Path::new(out).to_path_buf();
    let s = py.detach(move || synthesize(&params, &out)).map_err(py_err)?;
    Ok(s.manifest_path.to_string_lossy().into_owned())
}

/// Processes a case; returns the initial grade result as JSON.
#[pyfunction]
#[pyo3(signature = (manifest, bindings, out, workers=1))]
fn process(py: Python<'_>, manifest: &str, bindings: &str, out: &str, workers: usize) -> PyResult<String> {
    let (m, b, o) = (Path::new(manifest).to_path_buf(), Path::new(bindings).to_path_buf(), Path::new(out).to_path_buf());
    let (_, derived) = py.detach(move || cmd_process(&m, &b, &o, &EngineConfig::default(), workers)).map_err(py_err)?;
    serde_json::to_string(&derived.grade).map_err(json_err)
}

/// Writes the report of a processed case; returns its text rendering.
#[pyfunction]
#[pyo3(signature = (case_dir, out, session_dir=None))]
fn report(case_dir: &str, out: &str, session_dir: Option<&str>) -> PyResult<String> {
    let r = cmd_report(Path::new(case_dir), session_dir.map(Path::new), Path::new(out)).map_err(py_err)?;
    Ok(render_text(&r))
}

#[pymodule]
fn meningrade(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(grade, m)?)?;
    m.add_function(wrap_pyfunction!(ki67_index, m)?)?;
    m.add_function(wrap_pyfunction!(pr_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(process, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
