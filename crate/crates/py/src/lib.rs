//! Python module `lad_drive`: the data pipeline, closed-loop evaluation and
//! metric helpers. Configurations and reports cross the boundary as JSON text.

use std::path::PathBuf;

use lad_core::anchors::Trajectory;
use lad_core::diffusion::NoiseSchedule;
use lad_core::metrics::{self, PenaltyTable};
use lad_core::oracle::{generate_scenario, ScenarioKind};
use lad_core::pipeline::{self, RunConfig};
use lad_core::LadError;
use pyo3::exceptions::{PyFileExistsError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: LadError) -> PyErr {
    match e {
        LadError::Io { .. } => PyIOError::new_err(e.to_string()),
        LadError::Exists(_) => PyFileExistsError::new_err(e.to_string()),
        LadError::Config(_) | LadError::Unknown { .. } | LadError::Dimension { .. } | LadError::Record { .. } => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config_from(json: Option<&str>, out: Option<PathBuf>) -> PyResult<RunConfig> {
    let mut c = match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("run configuration: {e}")))?,
        None => RunConfig::default(),
    };
    if out.is_some() {
        c.paths.out = out;
    }
    c.validate().map_err(to_py)?;
    Ok(c)
}

#[pyfunction]
fn version() -> &'static str {
    lad_core::VERSION
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// Expert waypoints of one generated scenario, one `[[x, y]; 5]` entry per frame.
#[pyfunction]
fn expert_waypoints(seed: u64, kind: &str) -> PyResult<Vec<Vec<[f64; 2]>>> {
    let kind: ScenarioKind = kind.parse().map_err(to_py)?;
    let g = generate_scenario(seed, kind).map_err(to_py)?;
    Ok(g.records.iter().map(|r| r.trajectory.waypoints.to_vec()).collect())
}

#[pyfunction]
#[pyo3(signature = (out, config=None, force=false))]
fn gen_data(out: PathBuf, config: Option<&str>, force: bool) -> PyResult<(usize, usize)> {
    let c = config_from(config, Some(out))?;
    let s = pipeline::gen_data(&c, force).map_err(to_py)?;
    Ok((s.scenarios, s.records))
}

/// Returns the anchors as `[[x, y]; 5]` polylines.
#[pyfunction]
#[pyo3(signature = (data, out, config=None, force=false))]
fn cluster(data: PathBuf, out: PathBuf, config: Option<&str>, force: bool) -> PyResult<Vec<Vec<[f64; 2]>>> {
    let mut c = config_from(config, Some(out))?;
    c.paths.data = Some(data);
    let set = pipeline::cluster(&c, force).map_err(to_py)?;
    Ok(set.anchors.iter().map(|a| a.waypoints.to_vec()).collect())
}

/// Trains and returns the per-step total loss.
#[pyfunction]
#[pyo3(signature = (data, anchors, out, config=None, force=false))]
fn train(py: Python<'_>, data: PathBuf, anchors: PathBuf, out: PathBuf, config: Option<&str>, force: bool) -> PyResult<Vec<f64>> {
    let mut c = config_from(config, Some(out))?;
    c.paths.data = Some(data);
    c.paths.anchors = Some(anchors);
    let outcome = py.detach(|| pipeline::train_model(&c, force)).map_err(to_py)?;
    Ok(outcome.log.iter().map(|r| r.total).collect())
}

/// Evaluates a checkpoint and returns the benchmark report as JSON.
#[pyfunction]
#[pyo3(signature = (checkpoint, anchors, out, config=None, force=false))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, anchors: PathBuf, out: PathBuf, config: Option<&str>, force: bool) -> PyResult<String> {
    let mut c = config_from(config, Some(out))?;
    c.paths.checkpoint = Some(checkpoint);
    c.paths.anchors = Some(anchors);
    let report = py.detach(|| pipeline::evaluate(&c, force)).map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
#[pyo3(signature = (log, out, force=false))]
fn replay(log: PathBuf, out: PathBuf, force: bool) -> PyResult<PathBuf> {
    pipeline::replay(&log, &out, force).map_err(to_py)
}

#[pyfunction]
fn driving_score(rc: f64, is: f64) -> f64 {
    metrics::driving_score(rc, is)
}

/// Multiplicative infraction score for a list of category codes.
#[pyfunction]
#[pyo3(signature = (codes, penalties=None))]
fn infraction_score(codes: Vec<String>, penalties: Option<&str>) -> PyResult<f64> {
    let table: PenaltyTable = match penalties {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => PenaltyTable::default(),
    };
    let codes: Vec<&str> = codes.iter().map(String::as_str).collect();
    metrics::infraction_score_codes(&codes, &table).map_err(to_py)
}

/// Cumulative signal level of the default noise schedule at step `t`.
#[pyfunction]
fn alpha_bar(t: usize) -> f64 {
    NoiseSchedule::default().alpha_bar(t)
}

/// Average displacement between two five-waypoint trajectories.
#[pyfunction]
fn ade(a: [[f64; 2]; 5], b: [[f64; 2]; 5]) -> PyResult<f64> {
    let a = Trajectory::new(a).map_err(to_py)?;
    let b = Trajectory::new(b).map_err(to_py)?;
    Ok(a.ade(&b))
}

#[pymodule]
fn lad_drive(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", lad_core::VERSION)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(expert_waypoints, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(driving_score, m)?)?;
    m.add_function(wrap_pyfunction!(infraction_score, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bar, m)?)?;
    m.add_function(wrap_pyfunction!(ade, m)?)?;
    Ok(())
}
