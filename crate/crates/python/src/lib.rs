//! Python module `haven`: sessions, headless trials, replay and planning.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use haven_core::config::{builtin_map, builtin_map_names, PolicyConfig, ScenarioKind, SimConfig};
use haven_core::engine::{self, ReplayError};
use haven_core::geometry::{self, Pose2D, Vec2};
use haven_core::log::{EndReason, TrialLog};
use haven_core::metrics;
use haven_core::planner::{self, MapFile};
use haven_core::policy::{self, HumanPolicy};
use haven_core::protocol::SnapshotFrame;

create_exception!(haven, ReplayDivergence, PyException, "A replayed log differs from the recording.");

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn pose_tuple(p: &Pose2D) -> (f64, f64, f64) {
    (p.x, p.y, p.heading())
}

fn build_config(scenario: &str, policy: Option<&str>, seed: Option<u64>, ticks: Option<u64>, map: Option<&str>) -> PyResult<SimConfig> {
    let kind = ScenarioKind::parse(scenario).ok_or_else(|| value_error(format!("unknown scenario {scenario:?}")))?;
    let mut cfg = SimConfig::for_scenario(kind);
    if let Some(p) = policy {
        cfg.policy = PolicyConfig::parse(p).ok_or_else(|| value_error(format!("unknown policy {p:?}")))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = ticks {
        cfg.tick_budget = t;
    }
    if let Some(m) = map {
        cfg.map = m.to_owned();
    }
    cfg.validate().map_err(value_error)?;
    Ok(cfg)
}

fn parse_log(text: &str) -> PyResult<TrialLog> {
    TrialLog::parse(text).map_err(value_error)
}

/// A simulated trial advanced one tick at a time. Without a scripted
/// policy the human only moves on `buffer_input`.
#[pyclass(unsendable)]
pub struct Session {
    inner: Option<engine::Session>,
    policy: Option<HumanPolicy>,
}

impl Session {
    fn get(&self) -> PyResult<&engine::Session> {
        self.inner.as_ref().ok_or_else(|| value_error("session already consumed"))
    }

    fn get_mut(&mut self) -> PyResult<&mut engine::Session> {
        self.inner.as_mut().ok_or_else(|| value_error("session already consumed"))
    }

    fn wrap(cfg: SimConfig) -> PyResult<Self> {
        let policy = match cfg.policy {
            PolicyConfig::Remote => None,
            _ => Some(HumanPolicy::from_config(&cfg)),
        };
        Ok(Self {
            inner: Some(engine::Session::new(cfg).map_err(value_error)?),
            policy,
        })
    }
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (scenario = "retrieval", seed = None, policy = None, ticks = None, map = None))]
    fn new(scenario: &str, seed: Option<u64>, policy: Option<&str>, ticks: Option<u64>, map: Option<&str>) -> PyResult<Self> {
        Self::wrap(build_config(scenario, Some(policy.unwrap_or("remote")), seed, ticks, map)?)
    }

    /// Session from a TOML configuration document.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Self::wrap(SimConfig::parse(text).map_err(value_error)?)
    }

    fn buffer_input(&mut self, x: f64, y: f64) -> PyResult<()> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(value_error("input must be finite"));
        }
        self.get_mut()?.buffer_input(Vec2::new(x, y));
        Ok(())
    }

    /// Advances `n` ticks, stopping early if the trial ends. Returns whether
    /// the trial is over.
    #[pyo3(signature = (n = 1))]
    fn tick(&mut self, n: u64) -> PyResult<bool> {
        for _ in 0..n {
            let policy_input = match (&mut self.policy, self.inner.as_ref()) {
                (Some(p), Some(s)) if !s.is_ended() => Some(p.input(s)),
                _ => None,
            };
            let s = self.get_mut()?;
            if s.is_ended() {
                break;
            }
            if let Some(v) = policy_input {
                s.buffer_input(v);
            }
            s.tick();
        }
        Ok(self.get()?.is_ended())
    }

    /// Runs until the trial ends.
    fn run(&mut self) -> PyResult<()> {
        while !self.get()?.is_ended() {
            self.tick(1)?;
        }
        Ok(())
    }

    /// Ends the trial early; `reason` is "disconnect" or "budget".
    #[pyo3(signature = (reason = "disconnect"))]
    fn end(&mut self, reason: &str) -> PyResult<()> {
        let r = match reason {
            "disconnect" => EndReason::Disconnect,
            "budget" => EndReason::Budget,
            other => return Err(value_error(format!("unsupported end reason {other:?}"))),
        };
        self.get_mut()?.end(r);
        Ok(())
    }

    #[getter]
    fn tick_count(&self) -> PyResult<u64> {
        Ok(self.get()?.tick_count())
    }

    #[getter]
    fn is_ended(&self) -> PyResult<bool> {
        Ok(self.get()?.is_ended())
    }

    #[getter]
    fn state_hash(&self) -> PyResult<u64> {
        Ok(self.get()?.state_hash())
    }

    #[getter]
    fn robot_pose(&self) -> PyResult<(f64, f64, f64)> {
        Ok(pose_tuple(&self.get()?.state().robot.pose))
    }

    #[getter]
    fn human_pose(&self) -> PyResult<Option<(f64, f64, f64)>> {
        Ok(self.get()?.state().human.as_ref().map(|h| pose_tuple(&h.pose)))
    }

    #[getter]
    fn mode<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.get()?.state().mode)
    }

    #[getter]
    fn battery(&self) -> PyResult<f64> {
        Ok(self.get()?.state().robot.battery.fraction())
    }

    /// The current snapshot frame as sent to live clients.
    fn snapshot<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &SnapshotFrame::of(self.get()?))
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.get()?.metrics())
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.get()?.config())
    }

    /// The trial log so far as text.
    fn log_text(&self) -> PyResult<String> {
        Ok(self.get()?.log().to_text())
    }
}

/// Runs a headless trial; returns `(log_text, metrics)`.
#[pyfunction]
#[pyo3(signature = (scenario, policy = None, seed = None, ticks = None, map = None))]
fn run_trial<'py>(
    py: Python<'py>,
    scenario: &str,
    policy: Option<&str>,
    seed: Option<u64>,
    ticks: Option<u64>,
    map: Option<&str>,
) -> PyResult<(String, Bound<'py, PyAny>)> {
    let cfg = build_config(scenario, policy, seed, ticks, map)?;
    let (log, m) = py.detach(|| policy::run_trial(&cfg)).map_err(value_error)?;
    Ok((log.to_text(), to_py(py, &m)?))
}

/// Runs a headless trial from a TOML configuration document.
#[pyfunction]
fn run_config<'py>(py: Python<'py>, text: &str) -> PyResult<(String, Bound<'py, PyAny>)> {
    let cfg = SimConfig::parse(text).map_err(value_error)?;
    let (log, m) = py.detach(|| policy::run_trial(&cfg)).map_err(value_error)?;
    Ok((log.to_text(), to_py(py, &m)?))
}

/// Replays a log. Raises `ReplayDivergence` with the tick on mismatch and
/// `ValueError` when `config_toml` does not match the recording.
#[pyfunction]
#[pyo3(signature = (log_text, config_toml = None))]
fn verify(py: Python<'_>, log_text: &str, config_toml: Option<&str>) -> PyResult<()> {
    let log = parse_log(log_text)?;
    let cfg = config_toml.map(SimConfig::parse).transpose().map_err(value_error)?;
    match py.detach(|| engine::replay(&log, cfg.as_ref())) {
        Ok(_) => Ok(()),
        Err(ReplayError::Divergence { tick, .. }) => Err(ReplayDivergence::new_err((format!("replay diverged at tick {tick}"), tick))),
        Err(e) => Err(value_error(e)),
    }
}

#[pyfunction]
fn finalize_metrics<'py>(py: Python<'py>, log_text: &str) -> PyResult<Bound<'py, PyAny>> {
    let m = metrics::finalize_metrics(&parse_log(log_text)?).map_err(value_error)?;
    to_py(py, &m)
}

#[pyfunction]
fn builtin_maps() -> Vec<String> {
    builtin_map_names().map(|n| format!("builtin:{n}")).collect()
}

#[pyfunction]
fn wrap_angle(a: f64) -> f64 {
    geometry::wrap_angle(a)
}

/// Signed bearing from `pose` to `target`; None when they coincide.
#[pyfunction]
fn signed_angle_to(pose: (f64, f64, f64), target: (f64, f64)) -> Option<f64> {
    geometry::signed_angle_to(&Pose2D::new(pose.0, pose.1, pose.2), Vec2::new(target.0, target.1))
        .ok()
        .map(|a| a.value())
}

/// Plans from `start` to `goal` on a map (`builtin:<name>`, a path, or map
/// text). Returns the plan with its primitives and total length.
#[pyfunction]
#[pyo3(signature = (map, start, goal, inflation = 0.25))]
fn plan<'py>(py: Python<'py>, map: &str, start: (f64, f64, f64), goal: (f64, f64), inflation: f64) -> PyResult<Bound<'py, PyAny>> {
    let m = if let Some(name) = map.strip_prefix("builtin:") {
        MapFile::parse(builtin_map(name).ok_or_else(|| value_error(format!("unknown builtin map {name:?}")))?)
    } else if map.contains('\n') {
        MapFile::parse(map)
    } else {
        MapFile::load(std::path::Path::new(map))
    }
    .map_err(value_error)?;
    let grid = m.nav_grid(inflation);
    let p = planner::plan(&grid, &Pose2D::new(start.0, start.1, start.2), Vec2::new(goal.0, goal.1), &[]).map_err(value_error)?;
    let out = to_py(py, &p)?;
    out.set_item("length", p.total_length())?;
    Ok(out)
}

#[pymodule]
pub fn haven(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PROTOCOL", haven_core::protocol::PROTOCOL)?;
    m.add("ReplayDivergence", m.py().get_type::<ReplayDivergence>())?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(finalize_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_maps, m)?)?;
    m.add_function(wrap_pyfunction!(wrap_angle, m)?)?;
    m.add_function(wrap_pyfunction!(signed_angle_to, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    Ok(())
}
