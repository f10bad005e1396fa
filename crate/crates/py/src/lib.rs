//! Python bindings for the `carfollow` crate.

use std::path::PathBuf;

use carfollow::ddpg::{self, ActorCheckpoint};
use carfollow::dp::{self, DpConfig};
use carfollow::error::Error;
use carfollow::harness::{self, ExperimentKind, ExperimentSpec, Inputs};
use carfollow::{env as cenv, metrics, plant, Case, EnvConfig, Trajectory};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingInput(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::InvalidConfig(_)
        | Error::RejectedInput { .. }
        | Error::UnsupportedTransfer { .. }
        | Error::Shape(_)
        | Error::LengthMismatch(_)
        | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn case_of(id: u8) -> PyResult<Case> {
    Case::try_from(id).map_err(to_py)
}

/// Number of delay steps for dead time `phi` at step `dt`.
#[pyfunction]
fn compute_k(phi: f64, dt: f64) -> usize {
    plant::compute_k(phi, dt)
}

/// Default environment configuration of a case, as a dict.
#[pyfunction]
fn default_config(py: Python<'_>, case: u8) -> PyResult<Bound<'_, PyAny>> {
    to_object(py, &harness::ExperimentConfig::for_case(case_of(case)?))
}

/// Car-following environment. Actions are accelerations in m/s^2.
#[pyclass(name = "Env")]
struct PyEnv {
    inner: cenv::Env,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (case = 1, seed = None))]
    fn new(case: u8, seed: Option<u64>) -> PyResult<Self> {
        let cfg = EnvConfig::for_case(case_of(case)?);
        let inner = match seed {
            Some(s) => cenv::Env::with_seed(cfg, s),
            None => cenv::Env::new(cfg),
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn case(&self) -> u8 {
        self.inner.config().case.id()
    }

    #[getter]
    fn observation_len(&self) -> usize {
        self.inner.config().observation_len()
    }

    #[getter]
    fn step_index(&self) -> usize {
        self.inner.step_index()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset().into_vec()
    }

    fn observation(&self) -> Vec<f64> {
        self.inner.observation().into_vec()
    }

    /// Returns `(observation, reward, done)`.
    fn step(&mut self, action: f64) -> PyResult<(Vec<f64>, f64, bool)> {
        let r = self.inner.step(action).map_err(to_py)?;
        Ok((r.observation.into_vec(), r.reward, r.done))
    }
}

/// Solves the DP baseline for a case and returns its summary and rollout.
#[pyfunction]
#[pyo3(signature = (case, grid_scale = 1.0))]
fn dp_solve(py: Python<'_>, case: u8, grid_scale: f64) -> PyResult<Bound<'_, PyAny>> {
    let cfg = EnvConfig::for_case(case_of(case)?);
    let dp_cfg = DpConfig {
        grid_scale,
        ..DpConfig::default()
    };
    let (sol, ro) = py
        .detach(|| {
            let sol = dp::solve(&cfg, &dp_cfg)?;
            let ro = dp::dp_rollout(&sol, &cfg)?;
            Ok::<_, Error>((sol, ro))
        })
        .map_err(to_py)?;
    let out = serde_json::json!({
        "start_cost": sol.start_cost,
        "off_grid_steps": ro.off_grid_steps,
        "stats": metrics::trajectory_stats(&ro.rollout.trajectory, &cfg),
        "trajectory": ro.rollout.trajectory.rows,
    });
    to_object(py, &out)
}

/// Trains a DDPG agent and writes its checkpoint to `checkpoint`.
/// Returns the learning curve and greedy-rollout statistics.
#[pyfunction]
#[pyo3(signature = (case, seed, steps, checkpoint))]
fn train(py: Python<'_>, case: u8, seed: u64, steps: usize, checkpoint: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let case = case_of(case)?;
    let env_cfg = EnvConfig::for_case(case);
    let agent_cfg = ddpg::AgentConfig {
        seed,
        total_steps: steps,
        ..ddpg::AgentConfig::for_case(case)
    };
    let (curve, stats) = py
        .detach(|| {
            let outcome = ddpg::train(&env_cfg, &agent_cfg)?;
            let ck = ActorCheckpoint::new(env_cfg.clone(), agent_cfg.clone(), outcome.agent.actor.clone());
            ck.save(&checkpoint)?;
            let eval = ddpg::evaluate(&ck.actor, case, &env_cfg)?;
            Ok::<_, Error>((outcome.curve, metrics::trajectory_stats(&eval.rollout.trajectory, &env_cfg)))
        })
        .map_err(to_py)?;
    to_object(py, &serde_json::json!({ "curve": curve, "greedy": stats }))
}

/// Greedy rollout of a saved actor on `case` (its own case by default).
#[pyfunction]
#[pyo3(signature = (checkpoint, case = None))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, case: Option<u8>) -> PyResult<Bound<'_, PyAny>> {
    let ck = ActorCheckpoint::load(&checkpoint).map_err(to_py)?;
    let target = case.map(case_of).transpose()?.unwrap_or(ck.case);
    let mut env_cfg = ck.env.clone();
    if target != ck.case {
        env_cfg = EnvConfig {
            case: target,
            ..env_cfg
        };
    }
    let eval = ddpg::evaluate(&ck.actor, ck.case, &env_cfg).map_err(to_py)?;
    let out = serde_json::json!({
        "stats": metrics::trajectory_stats(&eval.rollout.trajectory, &env_cfg),
        "trajectory": eval.rollout.trajectory.rows,
    });
    to_object(py, &out)
}

/// Compares two trajectory CSV files under the default config of `case`.
#[pyfunction]
#[pyo3(signature = (drl_csv, dp_csv, case = 1))]
fn compare(py: Python<'_>, drl_csv: PathBuf, dp_csv: PathBuf, case: u8) -> PyResult<Bound<'_, PyAny>> {
    let cfg = EnvConfig::for_case(case_of(case)?);
    let a = Trajectory::load_csv(&drl_csv).map_err(to_py)?;
    let b = Trajectory::load_csv(&dp_csv).map_err(to_py)?;
    to_object(py, &metrics::compare(&a, &b, &cfg).map_err(to_py)?)
}

/// Runs a full experiment into `out` and returns its manifest.
#[pyfunction]
#[pyo3(signature = (kind, out, case = None, seed = None, steps = None, grid_scale = None, checkpoint = None, overrides = Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn run_experiment<'py>(
    py: Python<'py>,
    kind: &str,
    out: PathBuf,
    case: Option<u8>,
    seed: Option<u64>,
    steps: Option<usize>,
    grid_scale: Option<f64>,
    checkpoint: Option<PathBuf>,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: ExperimentKind = serde_json::from_value(serde_json::Value::String(kind.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown experiment kind {kind:?}")))?;
    let mut spec = ExperimentSpec::new(kind, out);
    spec.case = case.map(case_of).transpose()?;
    spec.seed = seed;
    spec.steps = steps;
    spec.grid_scale = grid_scale;
    spec.inputs = Inputs {
        checkpoint,
        ..Inputs::default()
    };
    spec.overrides = overrides
        .iter()
        .map(|s| harness::parse_override(s))
        .collect::<Result<_, _>>()
        .map_err(to_py)?;
    let manifest = py.detach(|| harness::run_experiment(&spec)).map_err(to_py)?;
    to_object(py, &manifest)
}

#[pymodule]
fn carfollow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(compute_k, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(dp_solve, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
