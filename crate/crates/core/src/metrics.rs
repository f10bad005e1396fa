//! Trajectory statistics and DRL-versus-DP comparison.

use serde::{Deserialize, Serialize};

use crate::env::{stage_cost, EnvConfig};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Length of the steady-state window in seconds.
pub const STEADY_STATE_SECONDS: f64 = 5.0;
/// Minimum number of sign changes of `e` in the window to call it oscillating.
pub const OSCILLATION_MIN_CROSSINGS: usize = 2;
/// Minimum peak-to-peak `e` in the window to call it oscillating, meters.
pub const OSCILLATION_MIN_PEAK_TO_PEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub mean_abs_e: f64,
    pub max_e: f64,
    pub min_e: f64,
    pub max_abs_e: f64,
    pub zero_crossings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub episode_reward: f64,
    pub episode_cost: f64,
    pub steady_state: SteadyState,
    pub oscillating: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMetrics {
    pub drl: TrajectoryStats,
    pub dp: TrajectoryStats,
    /// `(cost_drl - cost_dp) / cost_dp` on unclipped costs.
    pub relative_gap: f64,
}

/// Number of rows in the steady-state window.
pub fn steady_window(cfg: &EnvConfig) -> usize {
    (STEADY_STATE_SECONDS / cfg.plant.dt).round() as usize
}

/// Unclipped cost of the episode, recomputed from the rows. The post-step
/// error of each row is `e + dt * e_dot` under every plant variant.
pub fn episode_cost(traj: &Trajectory, cfg: &EnvConfig) -> f64 {
    traj.rows
        .iter()
        .map(|r| stage_cost(r.e + cfg.plant.dt * r.e_dot, r.u, cfg))
        .sum()
}

pub fn steady_state(errors: &[f64]) -> SteadyState {
    if errors.is_empty() {
        return SteadyState {
            mean_abs_e: 0.0,
            max_e: 0.0,
            min_e: 0.0,
            max_abs_e: 0.0,
            zero_crossings: 0,
        };
    }
    let mean_abs_e = errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64;
    let max_e = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_e = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max_abs_e = errors.iter().map(|e| e.abs()).fold(0.0, f64::max);
    // Sign changes between consecutive non-zero samples.
    let mut zero_crossings = 0;
    let mut last_sign = 0.0;
    for &e in errors {
        if e != 0.0 {
            let s = e.signum();
            if last_sign != 0.0 && s != last_sign {
                zero_crossings += 1;
            }
            last_sign = s;
        }
    }
    SteadyState {
        mean_abs_e,
        max_e,
        min_e,
        max_abs_e,
        zero_crossings,
    }
}

pub fn is_oscillating(ss: &SteadyState) -> bool {
    ss.zero_crossings >= OSCILLATION_MIN_CROSSINGS && ss.max_e - ss.min_e > OSCILLATION_MIN_PEAK_TO_PEAK
}

pub fn trajectory_stats(traj: &Trajectory, cfg: &EnvConfig) -> TrajectoryStats {
    let errors: Vec<f64> = traj.errors().collect();
    let window = steady_window(cfg).min(errors.len());
    let steady_state = steady_state(&errors[errors.len() - window..]);
    TrajectoryStats {
        episode_reward: traj.episode_reward(),
        episode_cost: episode_cost(traj, cfg),
        oscillating: is_oscillating(&steady_state),
        steady_state,
    }
}

pub fn compare(drl: &Trajectory, dp: &Trajectory, cfg: &EnvConfig) -> Result<ComparisonMetrics> {
    if drl.len() != dp.len() {
        return Err(Error::LengthMismatch(format!(
            "DRL trajectory has {} rows, DP has {}",
            drl.len(),
            dp.len()
        )));
    }
    let drl = trajectory_stats(drl, cfg);
    let dp = trajectory_stats(dp, cfg);
    let relative_gap = if dp.episode_cost > 0.0 {
        (drl.episode_cost - dp.episode_cost) / dp.episode_cost
    } else if drl.episode_cost == dp.episode_cost {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ComparisonMetrics { drl, dp, relative_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TrajectoryRow;

    fn traj(errors: &[f64]) -> Trajectory {
        Trajectory {
            rows: errors
                .iter()
                .enumerate()
                .map(|(i, &e)| TrajectoryRow {
                    t: i as f64 * 0.1,
                    e,
                    e_dot: 0.0,
                    v_i: 30.0,
                    u: 0.0,
                    a: 0.0,
                    reward: -0.08 * e.abs(),
                })
                .collect(),
        }
    }

    #[test]
    fn identical_trajectories_have_zero_gap() {
        let t = traj(&(0..200).map(|i| 2.0 * (-(i as f64) / 20.0).exp()).collect::<Vec<_>>());
        let m = compare(&t, &t, &EnvConfig::default()).unwrap();
        assert_eq!(m.relative_gap, 0.0);
        assert!(!m.drl.oscillating);
    }

    #[test]
    fn zero_error_has_zero_stats() {
        let t = traj(&[0.0; 200]);
        let m = compare(&t, &t, &EnvConfig::default()).unwrap();
        let ss = m.drl.steady_state;
        assert_eq!((ss.mean_abs_e, ss.max_e, ss.min_e, ss.zero_crossings), (0.0, 0.0, 0.0, 0));
        assert_eq!(m.relative_gap, 0.0);
    }

    #[test]
    fn wavy_error_is_flagged() {
        let errs: Vec<f64> = (0..200).map(|i| 0.25 + 0.45 * (i as f64 * 0.25).sin()).collect();
        let s = trajectory_stats(&traj(&errs), &EnvConfig::default());
        assert!(s.oscillating);
        assert!(s.steady_state.max_e > 0.6);
        let calm: Vec<f64> = (0..200).map(|i| 0.05 * (i as f64 * 0.25).sin()).collect();
        assert!(!trajectory_stats(&traj(&calm), &EnvConfig::default()).oscillating);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            compare(&traj(&[0.0; 3]), &traj(&[0.0; 4]), &EnvConfig::default()),
            Err(Error::LengthMismatch(_))
        ));
    }
}
