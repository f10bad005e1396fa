//! Episodic MDP over the follower plant.
//!
//! The observation layout depends on the [`Case`]; the reward is the negated
//! absolute-value stage cost clipped to `[-1, 0]`, evaluated on the
//! post-step error and the issued command.

use std::fmt;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{PlantConfig, PlantState, ScenarioConfig};
use crate::trajectory::{Trajectory, TrajectoryRow};

/// Which plant effects are active, and therefore what the agent observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Case {
    /// Point mass: observation `[e, e_dot]`.
    Kinematic,
    /// Input delay only: `[e, e_dot, u_{t-k}, .., u_{t-1}]`.
    Delay,
    /// Command lag only: `[e, e_dot, a]`.
    Lag,
    /// Delay and lag: `[e, e_dot, a, u_{t-k}, .., u_{t-1}]`.
    DelayLag,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::Kinematic, Case::Delay, Case::Lag, Case::DelayLag];

    pub fn id(self) -> u8 {
        match self {
            Case::Kinematic => 1,
            Case::Delay => 2,
            Case::Lag => 3,
            Case::DelayLag => 4,
        }
    }

    pub fn has_delay(self) -> bool {
        matches!(self, Case::Delay | Case::DelayLag)
    }

    pub fn has_lag(self) -> bool {
        matches!(self, Case::Lag | Case::DelayLag)
    }

    /// The same plant with the input delay removed.
    pub fn without_delay(self) -> Case {
        match self {
            Case::Kinematic | Case::Delay => Case::Kinematic,
            Case::Lag | Case::DelayLag => Case::Lag,
        }
    }

    pub fn observation_len(self, k: usize) -> usize {
        match self {
            Case::Kinematic => 2,
            Case::Delay => 2 + k,
            Case::Lag => 3,
            Case::DelayLag => 3 + k,
        }
    }
}

impl TryFrom<u8> for Case {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Case::Kinematic),
            2 => Ok(Case::Delay),
            3 => Ok(Case::Lag),
            4 => Ok(Case::DelayLag),
            other => Err(Error::InvalidConfig(format!("case must be 1..=4, got {other}"))),
        }
    }
}

impl From<Case> for u8 {
    fn from(c: Case) -> u8 {
        c.id()
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Uniform perturbation of the initial error and error rate, for the
/// optional randomized-start mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartJitter {
    pub e: f64,
    pub e_dot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub case: Case,
    pub alpha: f64,
    pub beta: f64,
    pub e_nmax: f64,
    pub plant: PlantConfig,
    pub scenario: ScenarioConfig,
    pub start_jitter: Option<StartJitter>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::for_case(Case::Kinematic)
    }
}

impl EnvConfig {
    pub fn for_case(case: Case) -> Self {
        Self {
            case,
            alpha: 0.8,
            beta: 0.2,
            e_nmax: 10.0,
            plant: PlantConfig::default(),
            scenario: ScenarioConfig::default(),
            start_jitter: None,
        }
    }

    /// Plant parameters with the effect flags dictated by the case.
    pub fn plant_config(&self) -> PlantConfig {
        PlantConfig {
            lag_enabled: self.case.has_lag(),
            delay_enabled: self.case.has_delay(),
            ..self.plant
        }
    }

    pub fn delay_steps(&self) -> usize {
        self.plant_config().delay_steps()
    }

    pub fn observation_len(&self) -> usize {
        self.case.observation_len(self.delay_steps())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidConfig("alpha and beta must be positive".into()));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "alpha + beta must equal 1, got {}",
                self.alpha + self.beta
            )));
        }
        if !(self.e_nmax.is_finite() && self.e_nmax > 0.0) {
            return Err(Error::InvalidConfig("e_nmax must be positive".into()));
        }
        let plant = self.plant_config();
        plant.validate()?;
        if self.case.has_delay() && plant.delay_steps() == 0 {
            return Err(Error::InvalidConfig(format!(
                "phi = {} is shorter than one step of {} s",
                plant.phi, plant.dt
            )));
        }
        self.scenario.validate()
    }

    /// Start state of an episode without jitter.
    pub fn initial_state(&self) -> PlantState {
        PlantState::new(self.scenario.e0, self.scenario.e_dot0(), 0.0, self.delay_steps())
    }
}

/// Unclipped stage cost of one step.
#[inline]
pub fn stage_cost(e_next: f64, u: f64, cfg: &EnvConfig) -> f64 {
    cfg.alpha * e_next.abs() / cfg.e_nmax + cfg.beta * u.abs() / cfg.plant.u_max
}

/// Negated stage cost clipped to `[-1, 0]`.
#[inline]
pub fn reward(e_next: f64, u: f64, cfg: &EnvConfig) -> f64 {
    (-stage_cost(e_next, u, cfg)).max(-1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation(Vec<f64>);

impl Observation {
    pub fn of_state(state: &PlantState, case: Case) -> Self {
        let mut v = Vec::with_capacity(3 + state.pending.len());
        v.push(state.e);
        v.push(state.e_dot);
        if case.has_lag() {
            v.push(state.a);
        }
        if case.has_delay() {
            v.extend(state.pending.iter().copied());
        }
        Observation(v)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Observation {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Observation {
    fn from(v: Vec<f64>) -> Self {
        Observation(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Row describing the step just taken (pre-step state, issued command,
    /// acting acceleration, clipped reward).
    pub row: TrajectoryRow,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Maps observations to commands in m/s^2. `step` is the index of the
/// control step within the episode.
pub trait Policy {
    fn act(&mut self, step: usize, obs: &Observation) -> Result<f64>;
}

impl<F> Policy for F
where
    F: FnMut(usize, &Observation) -> f64,
{
    fn act(&mut self, step: usize, obs: &Observation) -> Result<f64> {
        Ok(self(step, obs))
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    plant: PlantConfig,
    state: PlantState,
    t: usize,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        Self::with_seed(cfg, 0)
    }

    /// The seed only matters in randomized-start mode.
    pub fn with_seed(cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let plant = cfg.plant_config();
        let state = cfg.initial_state();
        Ok(Self {
            cfg,
            plant,
            state,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn observation(&self) -> Observation {
        Observation::of_state(&self.state, self.cfg.case)
    }

    pub fn reset(&mut self) -> Observation {
        self.state = self.cfg.initial_state();
        if let Some(j) = self.cfg.start_jitter {
            if j.e > 0.0 {
                self.state.e += self.rng.random_range(-j.e..=j.e);
            }
            if j.e_dot > 0.0 {
                self.state.e_dot += self.rng.random_range(-j.e_dot..=j.e_dot);
            }
        }
        self.t = 0;
        self.observation()
    }

    /// Start the episode from an explicit plant state.
    pub fn reset_to(&mut self, state: PlantState) -> Result<Observation> {
        let k = self.plant.delay_steps();
        if state.pending.len() != k {
            return Err(Error::Shape(format!(
                "pending queue holds {} commands, plant needs {k}",
                state.pending.len()
            )));
        }
        self.state = state;
        self.t = 0;
        Ok(self.observation())
    }

    pub fn step(&mut self, action: f64) -> Result<StepResult> {
        let len = self.cfg.scenario.episode_len;
        if self.t >= len {
            return Err(Error::EpisodeFinished { steps: len });
        }
        if action.is_nan() {
            return Err(Error::NonFinite("action is NaN".into()));
        }
        let u_max = self.plant.u_max;
        let u = action.clamp(-u_max, u_max);
        let before = self.state.clone();
        self.state.advance(u, &self.plant)?;
        let cost = stage_cost(self.state.e, u, &self.cfg);
        let r = reward(self.state.e, u, &self.cfg);
        let row = TrajectoryRow {
            t: self.t as f64 * self.plant.dt,
            e: before.e,
            e_dot: before.e_dot,
            v_i: before.follower_speed(self.cfg.scenario.v_lead),
            u,
            a: self.state.a,
            reward: r,
        };
        self.t += 1;
        Ok(StepResult {
            observation: self.observation(),
            reward: r,
            done: self.t == len,
            info: StepInfo { row, cost },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Undiscounted sum of clipped rewards.
    pub episode_reward: f64,
    /// Undiscounted sum of unclipped stage costs.
    pub episode_cost: f64,
    pub final_state: PlantState,
}

/// Runs one full episode from `reset`.
pub fn rollout(env: &mut Env, policy: &mut dyn Policy) -> Result<Rollout> {
    let obs = env.reset();
    rollout_from(env, obs, policy)
}

/// Runs the rest of the current episode starting from `obs`.
pub fn rollout_from(env: &mut Env, mut obs: Observation, policy: &mut dyn Policy) -> Result<Rollout> {
    let mut rows = Vec::with_capacity(env.cfg.scenario.episode_len);
    let mut episode_reward = 0.0;
    let mut episode_cost = 0.0;
    loop {
        let u = policy.act(env.t, &obs)?;
        let res = env.step(u)?;
        episode_reward += res.reward;
        episode_cost += res.info.cost;
        rows.push(res.info.row);
        obs = res.observation;
        if res.done {
            break;
        }
    }
    Ok(Rollout {
        trajectory: Trajectory { rows },
        episode_reward,
        episode_cost,
        final_state: env.state.clone(),
    })
}
