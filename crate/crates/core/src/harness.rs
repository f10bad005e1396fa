//! Experiment orchestration: config layering, the experiment kinds, and the
//! artifact manifest.
//!
//! Every run writes into one output directory and finishes by writing
//! `manifest.json`, which lists each file with its SHA-256 and echoes the
//! effective configuration. Outputs contain no timestamps, so a rerun with
//! the same spec and seed reproduces the manifest byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ddpg::{self, moving_average, ActorCheckpoint, AgentConfig, CurvePoint};
use crate::dp::{self, DpConfig, DpSolution};
use crate::env::{Case, EnvConfig};
use crate::error::{Error, Result};
use crate::hashing::{sha256_hex, sha256_json};
use crate::metrics::{self, TrajectoryStats};
use crate::trajectory::Trajectory;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const MOVING_AVERAGE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub dp: DpConfig,
    /// Write the (large) DP table artifact on `dp-solve`.
    pub save_tables: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_case(Case::Kinematic)
    }
}

impl ExperimentConfig {
    pub fn for_case(case: Case) -> Self {
        Self {
            env: EnvConfig::for_case(case),
            agent: AgentConfig::for_case(case),
            dp: DpConfig::default(),
            save_tables: true,
        }
    }

    pub fn hash(&self) -> String {
        sha256_json(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    DpSolve,
    Evaluate,
    Transfer,
    Compare,
    Report,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inputs {
    pub checkpoint: Option<PathBuf>,
    pub drl_csv: Option<PathBuf>,
    pub dp_csv: Option<PathBuf>,
    pub dp_tables: Option<PathBuf>,
    pub report_dirs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub case: Option<Case>,
    pub config_file: Option<PathBuf>,
    /// Dotted-path leaf overrides such as `env.alpha = 0.7`.
    pub overrides: Vec<(String, Value)>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub grid_scale: Option<f64>,
    pub out: PathBuf,
    pub inputs: Inputs,
    /// Print training progress to stderr.
    pub progress: bool,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, out: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            case: None,
            config_file: None,
            overrides: Vec::new(),
            seed: None,
            steps: None,
            grid_scale: None,
            out: out.into(),
            inputs: Inputs::default(),
            progress: false,
        }
    }
}

/// Parses `a.b.c=value`; the value is read as JSON when possible and as a
/// bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {s:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.trim().to_string(), value))
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, l) => *b = l,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{path}: {part} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::InvalidConfig(format!("unknown config key {path}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}

/// Effective configuration: case defaults, then the config file (if any),
/// then the individual flags; later layers win.
pub fn effective_config(spec: &ExperimentSpec, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let file: Option<Value> = match &spec.config_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    let file_case = file
        .as_ref()
        .and_then(|v| v.pointer("/env/case"))
        .and_then(Value::as_u64)
        .map(|c| Case::try_from(c as u8))
        .transpose()?;
    let case = spec
        .case
        .or(file_case)
        .or(base.as_ref().map(|b| b.env.case))
        .unwrap_or(Case::Kinematic);
    let defaults = match base {
        Some(mut b) => {
            if b.env.case != case {
                b.env.case = case;
            }
            b
        }
        None => ExperimentConfig::for_case(case),
    };
    let mut value = serde_json::to_value(&defaults)?;
    if let Some(f) = file {
        merge(&mut value, f);
    }
    set_path(&mut value, "env.case", json!(case.id()))?;
    if let Some(seed) = spec.seed {
        set_path(&mut value, "agent.seed", json!(seed))?;
    }
    if let Some(steps) = spec.steps {
        set_path(&mut value, "agent.total_steps", json!(steps))?;
    }
    if let Some(scale) = spec.grid_scale {
        set_path(&mut value, "dp.grid_scale", json!(scale))?;
    }
    for (path, v) in &spec.overrides {
        set_path(&mut value, path, v.clone())?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)?;
    cfg.env.validate()?;
    cfg.agent.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ExperimentKind,
    pub case: Option<u8>,
    pub seed: Option<u64>,
    pub config: Option<ExperimentConfig>,
    pub config_hash: Option<String>,
    pub inputs: Vec<FileEntry>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Tracks files written into the output directory; on failure everything
/// written so far is removed.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn trajectory(&mut self, name: &str, traj: &Trajectory) -> Result<()> {
        let path = self.path(name);
        traj.export_csv(&path)
    }

    fn discard(&self) {
        for name in &self.written {
            let _ = fs::remove_file(self.dir.join(name));
        }
    }

    fn entries(&self) -> Result<Vec<FileEntry>> {
        let mut names = self.written.clone();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .map(|n| {
                let sha256 = hash_file(&self.dir.join(&n))?;
                Ok(FileEntry { path: n, sha256 })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
struct LearningCurveRow {
    episode: usize,
    reward: f64,
    steps: usize,
    moving_avg_100: f64,
}

pub fn learning_curve_csv(curve: &[CurvePoint]) -> Result<String> {
    let ma = moving_average(curve, MOVING_AVERAGE_WINDOW);
    let mut w = csv::Writer::from_writer(Vec::new());
    for (p, m) in curve.iter().zip(ma) {
        w.serialize(LearningCurveRow {
            episode: p.episode,
            reward: p.reward,
            steps: p.steps,
            moving_avg_100: m,
        })
        .map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
    }
    if curve.is_empty() {
        w.write_record(["episode", "reward", "steps", "moving_avg_100"])
            .map_err(|e| Error::Parse {
                line: 0,
                message: e.to_string(),
            })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::InvalidConfig(format!("{what} is required for this experiment")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpSummary {
    pub start_cost: f64,
    pub strategy: dp::DpStrategy,
    pub grid_points: Vec<usize>,
    pub actions: usize,
    pub e_spacing: Option<f64>,
    pub clamped_evaluations: u64,
    pub off_grid_steps: usize,
    pub rollout: TrajectoryStats,
}

/// Runs one experiment and returns its manifest.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Manifest> {
    let mut out = Outputs::new(&spec.out)?;
    match run_inner(spec, &mut out) {
        Ok(manifest) => Ok(manifest),
        Err(e) => {
            out.discard();
            if let Error::Diverged { checkpoint, .. } = &e {
                let _ = checkpoint.save(&spec.out.join("diverged_actor.json"), "diverged");
            }
            Err(e)
        }
    }
}

fn run_inner(spec: &ExperimentSpec, out: &mut Outputs) -> Result<Manifest> {
    let mut inputs = Vec::new();
    let mut note_input = |p: &Path| -> Result<()> {
        inputs.push(FileEntry {
            path: p.display().to_string(),
            sha256: hash_file(p)?,
        });
        Ok(())
    };
    let config: Option<ExperimentConfig> = match spec.kind {
        ExperimentKind::Train => {
            if spec.seed.is_none() {
                return Err(Error::InvalidConfig("train requires an explicit --seed".into()));
            }
            let cfg = effective_config(spec, None)?;
            run_train(spec, &cfg, out)?;
            Some(cfg)
        }
        ExperimentKind::DpSolve => {
            let cfg = effective_config(spec, None)?;
            if let Some(t) = &spec.inputs.dp_tables {
                if !t.exists() {
                    return Err(Error::MissingInput(t.clone()));
                }
                note_input(t)?;
            }
            run_dp(spec, &cfg, out)?;
            Some(cfg)
        }
        ExperimentKind::Evaluate | ExperimentKind::Transfer => {
            let ck_path = require(&spec.inputs.checkpoint, "--checkpoint")?;
            let ck = ActorCheckpoint::load(&ck_path)?;
            note_input(&ck_path)?;
            if let Some(p) = &spec.inputs.dp_csv {
                if !p.exists() {
                    return Err(Error::MissingInput(p.clone()));
                }
                note_input(p)?;
            }
            let base = ExperimentConfig {
                env: ck.env.clone(),
                agent: ck.agent.clone(),
                ..ExperimentConfig::default()
            };
            let cfg = effective_config(spec, Some(base))?;
            if spec.kind == ExperimentKind::Evaluate && cfg.env.case != ck.case {
                return Err(Error::UnsupportedTransfer {
                    from: ck.case.id(),
                    to: cfg.env.case.id(),
                });
            }
            run_evaluate(spec, &ck, &cfg.env, out)?;
            Some(cfg)
        }
        ExperimentKind::Compare => {
            let drl = require(&spec.inputs.drl_csv, "--drl")?;
            let dpp = require(&spec.inputs.dp_csv, "--dp")?;
            let cfg = effective_config(spec, None)?;
            let a = Trajectory::load_csv(&drl)?;
            let b = Trajectory::load_csv(&dpp)?;
            note_input(&drl)?;
            note_input(&dpp)?;
            let m = metrics::compare(&a, &b, &cfg.env)?;
            out.json(METRICS_FILE, &m)?;
            Some(cfg)
        }
        ExperimentKind::Report => {
            if spec.inputs.report_dirs.is_empty() {
                return Err(Error::InvalidConfig("report needs at least one run directory".into()));
            }
            for d in &spec.inputs.report_dirs {
                note_input(&d.join(MANIFEST_FILE))?;
            }
            run_report(spec, out)?;
            None
        }
    };
    let manifest = Manifest {
        kind: spec.kind,
        case: config.as_ref().map(|c| c.env.case.id()),
        seed: config.as_ref().map(|c| c.agent.seed),
        config_hash: config.as_ref().map(ExperimentConfig::hash),
        config,
        inputs,
        files: out.entries()?,
    };
    out.json(MANIFEST_FILE, &manifest)?;
    Ok(manifest)
}

fn run_train(spec: &ExperimentSpec, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let progress = spec.progress;
    let mut hook = |_: &ddpg::Agent, curve: &[CurvePoint]| {
        if progress && curve.len() % 50 == 0 {
            let ma = moving_average(curve, MOVING_AVERAGE_WINDOW);
            let last = curve.last().expect("non-empty curve");
            eprintln!(
                "episode {:>6}  steps {:>8}  reward {:>9.3}  avg100 {:>9.3}",
                last.episode,
                last.steps,
                last.reward,
                ma.last().copied().unwrap_or(0.0)
            );
        }
        true
    };
    let outcome = ddpg::train_with_hook(&cfg.env, &cfg.agent, &mut hook)?;
    let ck = ActorCheckpoint::new(cfg.env.clone(), cfg.agent.clone(), outcome.agent.actor.clone());
    let ck_path = out.path("actor.json");
    ck.save(&ck_path)?;
    out.text("learning_curve.csv", &learning_curve_csv(&outcome.curve)?)?;
    let eval = ddpg::evaluate(&ck.actor, cfg.env.case, &cfg.env)?;
    out.trajectory("trajectory.csv", &eval.rollout.trajectory)?;
    let stats = metrics::trajectory_stats(&eval.rollout.trajectory, &cfg.env);
    out.json(
        METRICS_FILE,
        &json!({
            "episodes": outcome.curve.len(),
            "steps": outcome.steps,
            "replay_size": outcome.buffer_len,
            "greedy": stats,
        }),
    )
}

fn run_dp(spec: &ExperimentSpec, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let solution = match &spec.inputs.dp_tables {
        Some(path) => {
            let sol = DpSolution::read_tables(path)?;
            if sol.env != cfg.env {
                return Err(Error::InvalidConfig(format!(
                    "tables in {} were solved for a different environment config",
                    path.display()
                )));
            }
            sol
        }
        None => dp::solve(&cfg.env, &cfg.dp)?,
    };
    let ro = dp::dp_rollout(&solution, &cfg.env)?;
    out.trajectory("dp_trajectory.csv", &ro.rollout.trajectory)?;
    if cfg.save_tables && spec.inputs.dp_tables.is_none() {
        let path = out.path("dp_tables.bin");
        solution.write_tables(&path)?;
    }
    let summary = DpSummary {
        start_cost: solution.start_cost,
        strategy: solution.strategy,
        grid_points: solution.grid.axes().iter().map(|a| a.len()).collect(),
        actions: solution.actions.len(),
        e_spacing: solution.grid.axes()[0].spacing(),
        clamped_evaluations: solution.diagnostics.clamped_evaluations.iter().sum(),
        off_grid_steps: ro.off_grid_steps,
        rollout: metrics::trajectory_stats(&ro.rollout.trajectory, &cfg.env),
    };
    out.json(METRICS_FILE, &summary)
}

fn run_evaluate(spec: &ExperimentSpec, ck: &ActorCheckpoint, env: &EnvConfig, out: &mut Outputs) -> Result<()> {
    let eval = ddpg::evaluate(&ck.actor, ck.case, env)?;
    let traj = &eval.rollout.trajectory;
    out.trajectory("trajectory.csv", traj)?;
    let value = match &spec.inputs.dp_csv {
        Some(p) => {
            let dp_traj = Trajectory::load_csv(p)?;
            serde_json::to_value(metrics::compare(traj, &dp_traj, env)?)?
        }
        None => json!({ "drl": metrics::trajectory_stats(traj, env) }),
    };
    out.json(
        METRICS_FILE,
        &json!({
            "trained_case": ck.case.id(),
            "evaluated_case": env.case.id(),
            "metrics": value,
        }),
    )
}

fn run_report(spec: &ExperimentSpec, out: &mut Outputs) -> Result<()> {
    let mut entries = Vec::new();
    let mut md = String::from("| run | kind | case | seed | metrics |\n|---|---|---|---|---|\n");
    for dir in &spec.inputs.report_dirs {
        let manifest = Manifest::load(dir)?;
        let metrics_path = dir.join(METRICS_FILE);
        let metrics: Value = if metrics_path.exists() {
            let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            serde_json::from_str(&text)?
        } else {
            Value::Null
        };
        let headline = headline(&metrics);
        md.push_str(&format!(
            "| {} | {:?} | {} | {} | {} |\n",
            dir.display(),
            manifest.kind,
            manifest.case.map_or("-".into(), |c| c.to_string()),
            manifest.seed.map_or("-".into(), |s| s.to_string()),
            headline
        ));
        entries.push(json!({
            "run": dir.display().to_string(),
            "kind": manifest.kind,
            "case": manifest.case,
            "seed": manifest.seed,
            "config_hash": manifest.config_hash,
            "metrics": metrics,
        }));
    }
    out.json("report.json", &entries)?;
    out.text("report.md", &md)
}

fn headline(metrics: &Value) -> String {
    let pick = |p: &str| metrics.pointer(p).and_then(Value::as_f64);
    let mut parts = Vec::new();
    for (label, ptr) in [
        ("dp cost", "/start_cost"),
        ("cost", "/greedy/episode_cost"),
        ("cost", "/metrics/drl/episode_cost"),
        ("gap", "/metrics/relative_gap"),
        ("gap", "/relative_gap"),
        ("ss mean|e|", "/rollout/steady_state/mean_abs_e"),
        ("ss mean|e|", "/greedy/steady_state/mean_abs_e"),
        ("ss mean|e|", "/metrics/drl/steady_state/mean_abs_e"),
    ] {
        if let Some(v) = pick(ptr) {
            parts.push(format!("{label} {v:.4}"));
        }
    }
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(", ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("env.alpha=0.7").unwrap(), ("env.alpha".into(), json!(0.7)));
        assert_eq!(
            parse_override("dp.strategy=augmented").unwrap(),
            ("dp.strategy".into(), json!("augmented"))
        );
        assert!(parse_override("nonsense").is_err());
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.json");
        fs::write(&file, r#"{"env": {"case": 3, "alpha": 0.6, "beta": 0.4}, "agent": {"hidden": 32}}"#).unwrap();
        let mut spec = ExperimentSpec::new(ExperimentKind::Train, dir.path());
        spec.config_file = Some(file);
        let cfg = effective_config(&spec, None).unwrap();
        assert_eq!(cfg.env.case, Case::Lag);
        assert_eq!((cfg.env.alpha, cfg.agent.hidden), (0.6, 32));
        spec.overrides = vec![("agent.hidden".into(), json!(16))];
        spec.case = Some(Case::DelayLag);
        spec.steps = Some(10);
        let cfg = effective_config(&spec, None).unwrap();
        assert_eq!(cfg.env.case, Case::DelayLag);
        assert_eq!((cfg.agent.hidden, cfg.agent.total_steps), (16, 10));
        spec.overrides = vec![("agent.hiden".into(), json!(16))];
        assert!(effective_config(&spec, None).is_err());
    }

    #[test]
    fn missing_checkpoint_is_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::new(ExperimentKind::Evaluate, dir.path().join("o"));
        spec.inputs.checkpoint = Some(dir.path().join("nope.json"));
        assert!(matches!(run_experiment(&spec), Err(Error::MissingInput(_))));
    }
}
