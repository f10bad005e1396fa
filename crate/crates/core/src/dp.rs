//! Finite-horizon dynamic programming over a rectilinear state grid.
//!
//! Cost-to-go tables are built backwards in time with multilinear
//! interpolation of `V_{t+1}` at off-grid successor states. Two strategies
//! handle the input delay:
//!
//! * [`DpStrategy::Augmented`] carries the pending commands as extra grid
//!   axes whose points are exactly the action values, so the queue shift is
//!   exact. State count grows as `M^k`.
//! * [`DpStrategy::Predictive`] exploits that the plant is deterministic: the
//!   pending commands fix the next `k` states, so the problem collapses onto
//!   the undelayed plant started from the predicted state `x_{t+k}`, with
//!   horizon `T - k`. The first `k` error terms are constants and the last
//!   `k` commands are never felt, so they are zero.
//!
//! [`brute_force_cost`] enumerates every action sequence on the exact plant
//! and is the oracle for small instances.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, stage_cost, Case, Env, EnvConfig, Observation, Policy, Rollout};
use crate::error::{Error, Result};
use crate::hashing::sha256_json;
use crate::plant::{integrate, PlantConfig, PlantState};

pub const MAX_DIMS: usize = 8;
pub const BRUTE_FORCE_BUDGET: u128 = 1_000_000;
/// Upper bound on grid cells accepted by the solver.
pub const MAX_GRID_CELLS: usize = 20_000_000;

const TABLE_MAGIC: &[u8; 8] = b"CFDPTBL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    points: Vec<f64>,
    uniform: bool,
}

impl Axis {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "axis [{lo}, {hi}] with {n} points needs lo < hi and at least 2 points"
            )));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        points[n - 1] = hi;
        Ok(Self { points, uniform: true })
    }

    /// Axis through arbitrary points (sorted and deduplicated). A single
    /// distinct point is padded with a second one so the axis has an
    /// interval.
    pub fn from_points(mut points: Vec<f64>) -> Result<Self> {
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("axis points must be finite".into()));
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        match points.len() {
            0 => return Err(Error::InvalidConfig("axis needs at least one point".into())),
            1 => points.push(points[0] + 1.0),
            _ => {}
        }
        Ok(Self { points, uniform: false })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spacing(&self) -> Option<f64> {
        self.uniform.then(|| self.points[1] - self.points[0])
    }

    /// Interval index `i` and weight `w` such that `x = (1-w) p[i] + w p[i+1]`,
    /// plus whether `x` had to be clamped into range.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64, bool) {
        let p = &self.points;
        let n = p.len();
        if x <= p[0] {
            return (0, 0.0, x < p[0]);
        }
        if x >= p[n - 1] {
            return (n - 2, 1.0, x > p[n - 1]);
        }
        let mut i = if self.uniform {
            (((x - p[0]) / (p[1] - p[0])) as usize).min(n - 2)
        } else {
            p.partition_point(|&q| q <= x) - 1
        };
        while i + 1 < n - 1 && p[i + 1] <= x {
            i += 1;
        }
        while i > 0 && p[i] > x {
            i -= 1;
        }
        (i, (x - p[i]) / (p[i + 1] - p[i]), false)
    }
}

/// Tensor-product grid, axes ordered `(e, e_dot[, a][, pending_1..pending_k])`,
/// last axis varying fastest in the flat layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
    lag: bool,
    pending: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>, lag: bool, pending: usize) -> Result<Self> {
        let expected = 2 + lag as usize + pending;
        if axes.len() != expected {
            return Err(Error::Shape(format!(
                "grid with lag={lag}, pending={pending} needs {expected} axes, got {}",
                axes.len()
            )));
        }
        if expected > MAX_DIMS {
            return Err(Error::Shape(format!("at most {MAX_DIMS} grid axes supported")));
        }
        Ok(Self { axes, lag, pending })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn has_lag_axis(&self) -> bool {
        self.lag
    }

    pub fn pending_axes(&self) -> usize {
        self.pending
    }

    pub fn cells(&self) -> usize {
        self.axes.iter().map(Axis::len).product()
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims()];
        for d in (0..self.dims().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.axes[d + 1].len();
        }
        strides
    }

    fn coords(&self, mut flat: usize, out: &mut [f64]) {
        for d in (0..self.dims()).rev() {
            let n = self.axes[d].len();
            out[d] = self.axes[d].points[flat % n];
            flat /= n;
        }
    }

    fn matches_case(&self, case: Case, pending: usize) -> bool {
        self.lag == case.has_lag() && self.pending == pending
    }

    /// Grid whose axes are the coordinate values of every state reachable
    /// from `start` within `horizon` steps under `actions`, so that every
    /// reachable transition lands exactly on a grid point.
    pub fn reachable(
        start: &PlantState,
        actions: &ActionSet,
        horizon: usize,
        cfg: &EnvConfig,
    ) -> Result<Self> {
        let plant = cfg.plant_config();
        let k = plant.delay_steps();
        if start.pending.len() != k {
            return Err(Error::Shape("start pending queue length differs from k".into()));
        }
        let lag = cfg.case.has_lag();
        let mut e = vec![start.e];
        let mut e_dot = vec![start.e_dot];
        let mut a = vec![start.a];
        let mut level = vec![start.clone()];
        for _ in 0..horizon {
            let mut next = Vec::with_capacity(level.len() * actions.len());
            for s in &level {
                for &u in actions.values() {
                    let n = crate::plant::plant_step(s, u, &plant)?;
                    e.push(n.e);
                    e_dot.push(n.e_dot);
                    a.push(n.a);
                    next.push(n);
                }
            }
            dedup_states(&mut next);
            level = next;
        }
        let mut axes = vec![Axis::from_points(e)?, Axis::from_points(e_dot)?];
        if lag {
            axes.push(Axis::from_points(a)?);
        }
        for _ in 0..k {
            axes.push(Axis::from_points(actions.values().to_vec())?);
        }
        Self::new(axes, lag, k)
    }
}

fn dedup_states(states: &mut Vec<PlantState>) {
    let key = |s: &PlantState| {
        let mut k = vec![s.e.to_bits(), s.e_dot.to_bits(), s.a.to_bits()];
        k.extend(s.pending.iter().map(|p| p.to_bits()));
        k
    };
    states.sort_by_key(key);
    states.dedup_by(|a, b| key(a) == key(b));
}

/// `M` evenly spaced commands spanning `[-u_max, u_max]`, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    values: Vec<f64>,
}

impl ActionSet {
    pub fn new(m: usize, u_max: f64) -> Result<Self> {
        if m % 2 == 0 || m == 0 {
            return Err(Error::InvalidConfig(format!("action count must be odd, got {m}")));
        }
        if !(u_max > 0.0) {
            return Err(Error::InvalidConfig("u_max must be positive".into()));
        }
        let half = m / 2;
        let positive: Vec<f64> = (1..=half)
            .map(|i| if i == half { u_max } else { u_max * (i as f64 / half as f64) })
            .collect();
        let mut values: Vec<f64> = positive.iter().rev().map(|v| -v).collect();
        values.push(0.0);
        values.extend(positive);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices ordered smallest `|u|` first, negative before positive.
    pub fn tie_order(&self) -> Vec<usize> {
        let mid = self.values.len() / 2;
        let mut order = vec![mid];
        for j in 1..=mid {
            order.push(mid - j);
            order.push(mid + j);
        }
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpStrategy {
    Predictive,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub e_range: [f64; 2],
    pub e_points: usize,
    pub e_dot_range: [f64; 2],
    pub e_dot_points: usize,
    /// Points on the acceleration axis, spanning `[-u_max, u_max]`.
    pub a_points: usize,
    pub actions: usize,
    /// Multiplies the number of intervals on the continuous axes.
    pub grid_scale: f64,
    pub strategy: DpStrategy,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            e_range: [-10.0, 10.0],
            e_points: 201,
            e_dot_range: [-5.0, 5.0],
            e_dot_points: 101,
            a_points: 27,
            actions: 27,
            grid_scale: 1.0,
            strategy: DpStrategy::Predictive,
        }
    }
}

impl DpConfig {
    fn scaled(&self, n: usize) -> Result<usize> {
        if !(self.grid_scale.is_finite() && self.grid_scale > 0.0) {
            return Err(Error::InvalidConfig("grid_scale must be positive".into()));
        }
        Ok((((n.max(2) - 1) as f64 * self.grid_scale).round() as usize).max(1) + 1)
    }

    pub fn action_set(&self, u_max: f64) -> Result<ActionSet> {
        ActionSet::new(self.actions, u_max)
    }

    /// Grid for the given case under this config's strategy.
    pub fn grid(&self, cfg: &EnvConfig) -> Result<Grid> {
        let u_max = cfg.plant.u_max;
        let mut axes = vec![
            Axis::uniform(self.e_range[0], self.e_range[1], self.scaled(self.e_points)?)?,
            Axis::uniform(self.e_dot_range[0], self.e_dot_range[1], self.scaled(self.e_dot_points)?)?,
        ];
        let lag = cfg.case.has_lag();
        if lag {
            axes.push(Axis::uniform(-u_max, u_max, self.scaled(self.a_points)?)?);
        }
        let pending = match self.strategy {
            DpStrategy::Augmented => cfg.delay_steps(),
            DpStrategy::Predictive => 0,
        };
        let actions = self.action_set(u_max)?;
        for _ in 0..pending {
            axes.push(Axis::from_points(actions.values().to_vec())?);
        }
        Grid::new(axes, lag, pending)
    }
}

/// Successor of grid-layout state `x` under command `u`; returns the stage
/// cost. Mirrors [`crate::plant::PlantState::advance`] exactly.
#[inline]
fn transition(
    x: &[f64],
    u: f64,
    lag: bool,
    pending: usize,
    plant: &PlantConfig,
    cfg: &EnvConfig,
    out: &mut [f64],
) -> f64 {
    let a = if lag { x[2] } else { 0.0 };
    let off = 2 + lag as usize;
    let effective = if pending > 0 { x[off] } else { u };
    let (e, e_dot, a_next) = integrate(x[0], x[1], a, effective, plant);
    out[0] = e;
    out[1] = e_dot;
    if lag {
        out[2] = a_next;
    }
    if pending > 0 {
        out[off..off + pending - 1].copy_from_slice(&x[off + 1..off + pending]);
        out[off + pending - 1] = u;
    }
    stage_cost(e, u, cfg)
}

/// Multilinear interpolation of a flat table at `x`. Returns the value and
/// whether any coordinate was clamped to the grid boundary.
#[inline]
fn interpolate<V: Copy + Into<f64>>(grid: &Grid, strides: &[usize], values: &[V], x: &[f64]) -> (f64, bool) {
    let d = grid.dims();
    let mut base = 0usize;
    let mut w = [0.0f64; MAX_DIMS];
    let mut clamped = false;
    for j in 0..d {
        let (i, wj, c) = grid.axes[j].locate(x[j]);
        base += i * strides[j];
        w[j] = wj;
        clamped |= c;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut idx = base;
        for j in 0..d {
            if corner >> j & 1 == 1 {
                weight *= w[j];
                idx += strides[j];
            } else {
                weight *= 1.0 - w[j];
            }
        }
        if weight != 0.0 {
            acc += weight * values[idx].into();
        }
    }
    (acc, clamped)
}

/// Interpolated value of `table` at `x` (public for inspection and tests).
pub fn interpolate_table(grid: &Grid, table: &[f64], x: &[f64]) -> Result<f64> {
    if table.len() != grid.cells() || x.len() != grid.dims() {
        return Err(Error::Shape("table or point does not match the grid".into()));
    }
    Ok(interpolate(grid, &grid.strides(), table, x).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpDiagnostics {
    /// Per time step, the number of (cell, action) evaluations whose
    /// successor left the grid and was clamped to its boundary.
    pub clamped_evaluations: Vec<u64>,
    /// Per time step, the number of cells whose greedy action's successor
    /// was clamped.
    pub clamped_cells: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub env: EnvConfig,
    pub strategy: DpStrategy,
    pub grid: Grid,
    pub actions: ActionSet,
    /// Steps covered by the tables.
    pub horizon: usize,
    /// Delay steps absorbed by prediction (0 for the augmented strategy).
    pub predicted_delay: usize,
    /// `values[t]` is the cost-to-go `V_t` over the grid, `t < horizon`;
    /// `V_horizon` is identically zero and not stored.
    pub values: Vec<Vec<f32>>,
    /// Greedy action index per grid cell and time step.
    pub policy: Vec<Vec<u8>>,
    /// Optimal cost from the scenario's start state.
    pub start_cost: f64,
    pub diagnostics: DpDiagnostics,
}

/// Backward induction on `grid` for `horizon` steps. The grid layout must
/// match the case (lag axis present iff the case has lag; one axis per
/// delayed command).
pub fn backward_induction(
    grid: &Grid,
    actions: &ActionSet,
    horizon: usize,
    cfg: &EnvConfig,
) -> Result<DpSolution> {
    cfg.validate()?;
    let k = cfg.delay_steps();
    if !grid.matches_case(cfg.case, k) {
        return Err(Error::Shape(format!(
            "grid (lag={}, pending={}) does not match case {} with k={k}",
            grid.lag, grid.pending, cfg.case
        )));
    }
    let start = cfg.initial_state();
    let mut x0 = vec![start.e, start.e_dot];
    if grid.lag {
        x0.push(start.a);
    }
    x0.extend(start.pending.iter().copied());
    solve_tables(grid, actions, horizon, cfg, cfg.plant_config(), DpStrategy::Augmented, 0, &x0, 0.0)
}

#[allow(clippy::too_many_arguments)]
fn solve_tables(
    grid: &Grid,
    actions: &ActionSet,
    horizon: usize,
    cfg: &EnvConfig,
    plant: PlantConfig,
    strategy: DpStrategy,
    predicted_delay: usize,
    x0: &[f64],
    start_offset: f64,
) -> Result<DpSolution> {
    let cells = grid.cells();
    if cells > MAX_GRID_CELLS {
        return Err(Error::BudgetExceeded {
            required: cells as u128,
            budget: MAX_GRID_CELLS as u128,
        });
    }
    if actions.len() > u8::MAX as usize + 1 {
        return Err(Error::InvalidConfig("at most 256 actions supported".into()));
    }
    let strides = grid.strides();
    let order = actions.tie_order();
    let dims = grid.dims();
    let (lag, pending) = (grid.lag, grid.pending);

    let mut next = vec![0.0f64; cells];
    let mut values = vec![Vec::new(); horizon];
    let mut policy = vec![Vec::new(); horizon];
    let mut clamped_evaluations = vec![0u64; horizon];
    let mut clamped_cells = vec![0u64; horizon];

    for t in (0..horizon).rev() {
        let evals = AtomicU64::new(0);
        let flagged = AtomicU64::new(0);
        let solved: Vec<(f64, u8)> = (0..cells)
            .into_par_iter()
            .with_min_len(1024)
            .map(|cell| {
                let mut x = [0.0; MAX_DIMS];
                let mut y = [0.0; MAX_DIMS];
                grid.coords(cell, &mut x[..dims]);
                let mut best = f64::INFINITY;
                let mut best_idx = order[0];
                let mut best_clamped = false;
                let mut n_clamped = 0;
                for &ai in &order {
                    let u = actions.values[ai];
                    let stage = transition(&x[..dims], u, lag, pending, &plant, cfg, &mut y[..dims]);
                    let (v, c) = interpolate(grid, &strides, &next, &y[..dims]);
                    n_clamped += c as u64;
                    let q = stage + v;
                    if q < best {
                        best = q;
                        best_idx = ai;
                        best_clamped = c;
                    }
                }
                if n_clamped > 0 {
                    evals.fetch_add(n_clamped, Ordering::Relaxed);
                }
                if best_clamped {
                    flagged.fetch_add(1, Ordering::Relaxed);
                }
                (best, best_idx as u8)
            })
            .collect();
        clamped_evaluations[t] = evals.into_inner();
        clamped_cells[t] = flagged.into_inner();
        let mut current = Vec::with_capacity(cells);
        let mut greedy = Vec::with_capacity(cells);
        for (v, a) in solved {
            current.push(v);
            greedy.push(a);
        }
        values[t] = current.iter().map(|&v| v as f32).collect();
        policy[t] = greedy;
        next = current;
    }
    // `next` now holds V_0 at full precision.
    let (v0, _) = interpolate(grid, &strides, &next, x0);
    Ok(DpSolution {
        env: cfg.clone(),
        strategy,
        grid: grid.clone(),
        actions: actions.clone(),
        horizon,
        predicted_delay,
        values,
        policy,
        start_cost: start_offset + v0,
        diagnostics: DpDiagnostics {
            clamped_evaluations,
            clamped_cells,
        },
    })
}

/// Solves the scenario in `cfg` with the grid and strategy from `dp`.
pub fn solve(cfg: &EnvConfig, dp: &DpConfig) -> Result<DpSolution> {
    cfg.validate()?;
    let actions = dp.action_set(cfg.plant.u_max)?;
    let grid = dp.grid(cfg)?;
    let horizon = cfg.scenario.episode_len;
    let k = cfg.delay_steps();
    if dp.strategy == DpStrategy::Augmented || k == 0 {
        return backward_induction(&grid, &actions, horizon, cfg);
    }
    // Undelayed plant from the predicted state x_k.
    let plant = PlantConfig {
        delay_enabled: false,
        ..cfg.plant_config()
    };
    let mut state = cfg.initial_state();
    let mut offset = 0.0;
    for _ in 0..k.min(horizon) {
        let effective = state.pending.pop_front().expect("k pending commands");
        let (e, e_dot, a) = integrate(state.e, state.e_dot, state.a, effective, &plant);
        offset += stage_cost(e, 0.0, cfg);
        state.e = e;
        state.e_dot = e_dot;
        state.a = a;
    }
    let mut z0 = vec![state.e, state.e_dot];
    if grid.lag {
        z0.push(state.a);
    }
    solve_tables(
        &grid,
        &actions,
        horizon.saturating_sub(k),
        cfg,
        plant,
        DpStrategy::Predictive,
        k,
        &z0,
        offset,
    )
}

impl DpSolution {
    fn table_plant(&self) -> PlantConfig {
        PlantConfig {
            delay_enabled: self.strategy == DpStrategy::Augmented && self.env.case.has_delay(),
            ..self.env.plant_config()
        }
    }

    /// Cost-to-go at time `t` (f32 tables) interpolated at `x`.
    pub fn value_at(&self, t: usize, x: &[f64]) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        interpolate(&self.grid, &self.grid.strides(), &self.values[t], x).0
    }

    /// Grid-layout state the tables are queried with for an observation.
    fn table_state(&self, obs: &[f64]) -> Vec<f64> {
        let case = self.env.case;
        let lag = case.has_lag();
        let off = 2 + lag as usize;
        if self.predicted_delay == 0 {
            return obs.to_vec();
        }
        let plant = self.table_plant();
        let (mut e, mut e_dot, mut a) = (obs[0], obs[1], if lag { obs[2] } else { 0.0 });
        for &p in &obs[off..] {
            (e, e_dot, a) = integrate(e, e_dot, a, p, &plant);
        }
        let mut z = vec![e, e_dot];
        if lag {
            z.push(a);
        }
        z
    }

    /// Greedy command at step `t` for an observation of this solution's
    /// case: per-action Q-values interpolated multilinearly at the
    /// continuous state, then argmin with the solver's tie order. Returns
    /// the command and whether the state was outside the grid.
    pub fn greedy_action(&self, t: usize, obs: &[f64]) -> (f64, bool) {
        if t >= self.horizon {
            return (0.0, false);
        }
        let x = self.table_state(obs);
        let grid = &self.grid;
        let d = grid.dims();
        let strides = grid.strides();
        let plant = self.table_plant();
        let mut base = [0usize; MAX_DIMS];
        let mut w = [0.0; MAX_DIMS];
        let mut off_grid = false;
        for j in 0..d {
            let (i, wj, c) = grid.axes[j].locate(x[j]);
            base[j] = i;
            w[j] = wj;
            off_grid |= c;
        }
        let order = self.actions.tie_order();
        let mut q = vec![0.0; self.actions.len()];
        let mut corner_x = [0.0; MAX_DIMS];
        let mut y = [0.0; MAX_DIMS];
        let next: Option<&[f32]> = self.values.get(t + 1).map(Vec::as_slice);
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            for j in 0..d {
                let bit = corner >> j & 1;
                weight *= if bit == 1 { w[j] } else { 1.0 - w[j] };
                corner_x[j] = grid.axes[j].points[base[j] + bit];
            }
            if weight == 0.0 {
                continue;
            }
            for &ai in &order {
                let u = self.actions.values[ai];
                let stage = transition(&corner_x[..d], u, grid.lag, grid.pending, &plant, &self.env, &mut y[..d]);
                let v = next.map_or(0.0, |tab| interpolate(grid, &strides, tab, &y[..d]).0);
                q[ai] += weight * (stage + v);
            }
        }
        let mut best = order[0];
        for &ai in &order[1..] {
            if q[ai] < q[best] {
                best = ai;
            }
        }
        (self.actions.values[best], off_grid)
    }

    pub fn policy(&self) -> DpPolicy<'_> {
        DpPolicy {
            solution: self,
            off_grid_steps: 0,
        }
    }

    pub fn config_hash(&self) -> String {
        sha256_json(&self.env)
    }

    pub fn grid_hash(&self) -> String {
        sha256_json(&self.grid)
    }

    pub fn action_hash(&self) -> String {
        sha256_json(&self.actions)
    }

    /// Binary table artifact: magic, little-endian u64 header length, JSON
    /// header, then the policy bytes (`horizon * cells`) and the values as
    /// little-endian f32 in the same order.
    pub fn write_tables(&self, path: &Path) -> Result<()> {
        let header = TableHeader {
            format: "carfollow-dp-tables/1".into(),
            env: self.env.clone(),
            strategy: self.strategy,
            grid: self.grid.clone(),
            actions: self.actions.clone(),
            horizon: self.horizon,
            predicted_delay: self.predicted_delay,
            start_cost: self.start_cost,
            diagnostics: self.diagnostics.clone(),
            config_hash: self.config_hash(),
            grid_hash: self.grid_hash(),
            action_hash: self.action_hash(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let header = serde_json::to_vec(&header)?;
        w.write_all(TABLE_MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for p in &self.policy {
            w.write_all(p).map_err(io)?;
        }
        for v in &self.values {
            let mut buf = Vec::with_capacity(v.len() * 4);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_tables(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Parse {
                line: 0,
                message: "not a DP table file".into(),
            });
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(io)?;
        let header: TableHeader = serde_json::from_slice(&header)?;
        if header.grid_hash != sha256_json(&header.grid)
            || header.action_hash != sha256_json(&header.actions)
            || header.config_hash != sha256_json(&header.env)
        {
            return Err(Error::Parse {
                line: 0,
                message: "table header hashes do not match its contents".into(),
            });
        }
        let cells = header.grid.cells();
        let mut policy = Vec::with_capacity(header.horizon);
        for _ in 0..header.horizon {
            let mut p = vec![0u8; cells];
            r.read_exact(&mut p).map_err(io)?;
            policy.push(p);
        }
        let mut values = Vec::with_capacity(header.horizon);
        let mut buf = vec![0u8; cells * 4];
        for _ in 0..header.horizon {
            r.read_exact(&mut buf).map_err(io)?;
            values.push(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        Ok(Self {
            env: header.env,
            strategy: header.strategy,
            grid: header.grid,
            actions: header.actions,
            horizon: header.horizon,
            predicted_delay: header.predicted_delay,
            values,
            policy,
            start_cost: header.start_cost,
            diagnostics: header.diagnostics,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableHeader {
    format: String,
    env: EnvConfig,
    strategy: DpStrategy,
    grid: Grid,
    actions: ActionSet,
    horizon: usize,
    predicted_delay: usize,
    start_cost: f64,
    diagnostics: DpDiagnostics,
    config_hash: String,
    grid_hash: String,
    action_hash: String,
}

/// Closed-loop policy backed by DP tables.
pub struct DpPolicy<'a> {
    solution: &'a DpSolution,
    /// Steps at which the queried state lay outside the grid.
    pub off_grid_steps: usize,
}

impl Policy for DpPolicy<'_> {
    fn act(&mut self, step: usize, obs: &Observation) -> Result<f64> {
        let (u, off) = self.solution.greedy_action(step, obs);
        self.off_grid_steps += off as usize;
        Ok(u)
    }
}

#[derive(Debug, Clone)]
pub struct DpRollout {
    pub rollout: Rollout,
    pub off_grid_steps: usize,
}

/// Rolls the greedy DP policy through the exact plant of `cfg`.
pub fn dp_rollout(solution: &DpSolution, cfg: &EnvConfig) -> Result<DpRollout> {
    if cfg.case != solution.env.case || cfg.delay_steps() != solution.env.delay_steps() {
        return Err(Error::Shape(format!(
            "tables were solved for case {}, rollout asked for case {}",
            solution.env.case, cfg.case
        )));
    }
    let mut env = Env::new(cfg.clone())?;
    let mut policy = solution.policy();
    let rollout = rollout(&mut env, &mut policy)?;
    Ok(DpRollout {
        rollout,
        off_grid_steps: policy.off_grid_steps,
    })
}

/// Exhaustive minimum of the accumulated stage cost over all `M^horizon`
/// command sequences on the exact plant. Each sequence's cost is summed
/// from the last step backwards, matching the association of backward
/// induction. Ties go to the lexicographically smallest index sequence.
pub fn brute_force_cost(
    start: &PlantState,
    actions: &ActionSet,
    horizon: usize,
    cfg: &EnvConfig,
) -> Result<(f64, Vec<usize>)> {
    let m = actions.len();
    let required = (m as u128).checked_pow(horizon as u32).unwrap_or(u128::MAX);
    if required > BRUTE_FORCE_BUDGET {
        return Err(Error::BudgetExceeded {
            required,
            budget: BRUTE_FORCE_BUDGET,
        });
    }
    let plant = cfg.plant_config();
    let mut seq = vec![0usize; horizon];
    let mut best = (f64::INFINITY, seq.clone());
    let mut costs = vec![0.0; horizon];
    loop {
        let mut s = start.clone();
        for (c, &ai) in costs.iter_mut().zip(&seq) {
            let u = actions.values[ai];
            s.advance(u, &plant)?;
            *c = stage_cost(s.e, u, cfg);
        }
        let total = costs.iter().rev().fold(0.0, |acc, c| c + acc);
        if total < best.0 {
            best = (total, seq.clone());
        }
        // Odometer increment, last position fastest, so sequences are
        // visited in lexicographic order.
        let mut pos = horizon;
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            seq[pos] += 1;
            if seq[pos] < m {
                break;
            }
            seq[pos] = 0;
        }
    }
}
