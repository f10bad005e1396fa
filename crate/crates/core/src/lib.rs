//! Car-following control lab.
//!
//! A follower vehicle regulates its gap to a lead car driving at constant
//! speed. The crate provides the discrete-time plant (optionally with input
//! delay and first-order command lag), an episodic environment with the
//! clipped absolute-value reward, a dynamic-programming benchmark, a small
//! dense network engine and a DDPG agent, plus the experiment harness that
//! ties them together.

pub mod ddpg;
pub mod dp;
pub mod env;
pub mod error;
pub mod harness;
pub mod hashing;
pub mod metrics;
pub mod nn;
pub mod plant;
pub mod trajectory;

pub use env::{Case, Env, EnvConfig, Observation, Policy, Rollout};
pub use error::{Error, Result};
pub use plant::{PlantConfig, PlantState, ScenarioConfig};
pub use trajectory::{Trajectory, TrajectoryRow};
