//! Follower-vehicle plant in gap-error coordinates.
//!
//! The state is the gap-keeping error `e`, its rate `e_dot = v_lead - v_follow`
//! and the actual follower acceleration `a`. Commands pass through a pure
//! delay of `k` steps (a FIFO of pending commands) and then, optionally, a
//! first-order lag before they act on the error dynamics. Everything is
//! forward-Euler at a fixed step `dt`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack when converting a delay into a whole number of steps, so
/// that e.g. 0.3 s at 0.1 s resolves to 3 steps despite `0.3 / 0.1 < 3`.
const DELAY_STEP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub dt: f64,
    pub tau: f64,
    pub phi: f64,
    pub u_max: f64,
    pub lag_enabled: bool,
    pub delay_enabled: bool,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            tau: 0.5,
            phi: 0.2,
            u_max: 2.6,
            lag_enabled: false,
            delay_enabled: false,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.lag_enabled && !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be positive when the lag is enabled");
        }
        if !(self.phi.is_finite() && self.phi >= 0.0) {
            return bad("phi must be non-negative");
        }
        if !(self.u_max.is_finite() && self.u_max > 0.0) {
            return bad("u_max must be positive");
        }
        if self.delay_enabled && self.phi <= 0.0 {
            return bad("delay enabled with phi = 0");
        }
        Ok(())
    }

    /// Length of the pending-command pipeline.
    pub fn delay_steps(&self) -> usize {
        if self.delay_enabled {
            compute_k(self.phi, self.dt)
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub v_lead: f64,
    pub v_follow0: f64,
    pub e0: f64,
    pub episode_len: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            v_lead: 30.0,
            v_follow0: 27.5,
            e0: 2.5,
            episode_len: 200,
        }
    }
}

impl ScenarioConfig {
    pub fn e_dot0(&self) -> f64 {
        self.v_lead - self.v_follow0
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_len == 0 {
            return Err(Error::InvalidConfig("episode_len must be positive".into()));
        }
        if !(self.v_lead.is_finite() && self.v_follow0.is_finite() && self.e0.is_finite()) {
            return Err(Error::InvalidConfig("scenario values must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub e: f64,
    pub e_dot: f64,
    pub a: f64,
    /// Issued but not yet effective commands, oldest first.
    pub pending: VecDeque<f64>,
}

impl PlantState {
    /// State with a zero-filled pipeline of `k` commands.
    pub fn new(e: f64, e_dot: f64, a: f64, k: usize) -> Self {
        Self {
            e,
            e_dot,
            a,
            pending: std::iter::repeat_n(0.0, k).collect(),
        }
    }

    pub fn follower_speed(&self, v_lead: f64) -> f64 {
        v_lead - self.e_dot
    }

    /// In-place [`plant_step`].
    pub fn advance(&mut self, u: f64, cfg: &PlantConfig) -> Result<()> {
        check_command(u, cfg.u_max)?;
        let effective = if self.pending.is_empty() {
            u
        } else {
            self.pending.push_back(u);
            self.pending.pop_front().expect("pipeline is non-empty")
        };
        let (e, e_dot, a) = integrate(self.e, self.e_dot, self.a, effective, cfg);
        self.e = e;
        self.e_dot = e_dot;
        self.a = a;
        Ok(())
    }
}

/// Largest `k` with `k * dt <= phi`.
pub fn compute_k(phi: f64, dt: f64) -> usize {
    debug_assert!(phi >= 0.0 && dt > 0.0);
    let ratio = phi / dt;
    (ratio * (1.0 + DELAY_STEP_SLACK)).floor().max(0.0) as usize
}

fn check_command(u: f64, u_max: f64) -> Result<()> {
    if u.is_finite() && u.abs() <= u_max {
        Ok(())
    } else {
        Err(Error::RejectedInput { command: u, u_max })
    }
}

/// Point-mass update: the command is the acceleration.
pub fn kinematic_step(state: &PlantState, u: f64, dt: f64, u_max: f64) -> Result<PlantState> {
    check_command(u, u_max)?;
    Ok(PlantState {
        e: state.e + dt * state.e_dot,
        e_dot: state.e_dot - dt * u,
        a: u,
        pending: state.pending.clone(),
    })
}

/// One Euler step of the first-order command lag.
#[inline]
pub fn lag_step(a: f64, u_delayed: f64, dt: f64, tau: f64) -> f64 {
    a + dt * (u_delayed - a) / tau
}

/// Lag (when enabled) followed by the error integration, given the command
/// that is effective this step. Shared by the plant and the DP transition
/// model so both produce bit-identical states.
#[inline]
pub fn integrate(e: f64, e_dot: f64, a: f64, effective: f64, cfg: &PlantConfig) -> (f64, f64, f64) {
    let a_next = if cfg.lag_enabled {
        lag_step(a, effective, cfg.dt, cfg.tau)
    } else {
        effective
    };
    (e + cfg.dt * e_dot, e_dot - cfg.dt * a_next, a_next)
}

/// Delay pipeline, then lag, then error integration with the updated
/// acceleration.
pub fn plant_step(state: &PlantState, u: f64, cfg: &PlantConfig) -> Result<PlantState> {
    let mut next = state.clone();
    next.advance(u, cfg)?;
    Ok(next)
}
