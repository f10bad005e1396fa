//! Deep deterministic policy gradient agent for the car-following MDP.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{rollout, Case, Env, EnvConfig, Observation, Policy, Rollout};
use crate::error::{Error, Result};
use crate::hashing::sha256_json;
use crate::nn::{soft_update, Adam, Mlp, MlpSpec, Mode};

pub const ACTOR_CHECKPOINT_FORMAT: &str = "carfollow-actor/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Soft target update coefficient.
    pub blend: f64,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Exploration noise, in normalized action units.
    pub noise_mean: f64,
    pub noise_std: f64,
    pub hidden: usize,
    pub total_steps: usize,
    /// Uniform random actions before the first gradient update.
    pub warmup_steps: usize,
    /// Batch normalization in both networks. Off by default: it stalls learning here.
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::for_case(Case::Kinematic)
    }
}

impl AgentConfig {
    /// Network width and step budget follow the case: delayed cases get the
    /// wider net and the longer run.
    pub fn for_case(case: Case) -> Self {
        let (hidden, total_steps) = if case.has_delay() {
            (128, 1_500_000)
        } else {
            (64, 1_000_000)
        };
        Self {
            blend: 0.001,
            gamma: 0.99,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            buffer_capacity: 500_000,
            batch_size: 64,
            noise_mean: 0.0,
            noise_std: 0.02,
            hidden,
            total_steps,
            warmup_steps: 1000,
            batch_norm: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.blend > 0.0 && self.blend <= 1.0) {
            return bad("blend must lie in (0, 1]");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer capacity below batch size");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        if !(self.noise_std >= 0.0 && self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("noise and learning rates must be non-negative / positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Action in `[-1, 1]`.
    pub action: f64,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Sampled mini-batch as dense matrices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Vec<bool>,
}

/// Fixed-capacity ring of transitions; once full, each push overwrites the
/// oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    obs: Vec<f64>,
    next_obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize) -> Self {
        Self {
            capacity,
            obs_dim,
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.obs.len() != self.obs_dim || t.next_obs.len() != self.obs_dim {
            return Err(Error::Shape(format!(
                "transition observation widths {}/{} but buffer stores {}",
                t.obs.len(),
                t.next_obs.len(),
                self.obs_dim
            )));
        }
        let d = self.obs_dim;
        if self.len() < self.capacity {
            self.obs.extend_from_slice(&t.obs);
            self.next_obs.extend_from_slice(&t.next_obs);
            self.actions.push(t.action);
            self.rewards.push(t.reward);
            self.dones.push(t.done);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.obs[slot * d..(slot + 1) * d].copy_from_slice(&t.obs);
            self.next_obs[slot * d..(slot + 1) * d].copy_from_slice(&t.next_obs);
            self.actions[slot] = t.action;
            self.rewards[slot] = t.reward;
            self.dones[slot] = t.done;
        }
        self.inserted += 1;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<Transition> {
        (i < self.len()).then(|| {
            let d = self.obs_dim;
            Transition {
                obs: self.obs[i * d..(i + 1) * d].to_vec(),
                action: self.actions[i],
                reward: self.rewards[i],
                next_obs: self.next_obs[i * d..(i + 1) * d].to_vec(),
                done: self.dones[i],
            }
        })
    }

    /// Slot index of a uniform draw.
    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.len())
    }

    /// Uniform sampling with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Batch> {
        if self.len() < n {
            return Err(Error::InsufficientBuffer { len: self.len(), batch: n });
        }
        let d = self.obs_dim;
        let mut obs = Array2::zeros((n, d));
        let mut next_obs = Array2::zeros((n, d));
        let mut actions = Array2::zeros((n, 1));
        let mut rewards = Array1::zeros(n);
        let mut dones = Vec::with_capacity(n);
        for row in 0..n {
            let i = self.sample_index(rng);
            for j in 0..d {
                obs[[row, j]] = self.obs[i * d + j];
                next_obs[[row, j]] = self.next_obs[i * d + j];
            }
            actions[[row, 0]] = self.actions[i];
            rewards[row] = self.rewards[i];
            dones.push(self.dones[i]);
        }
        Ok(Batch {
            obs,
            actions,
            rewards,
            next_obs,
            dones,
        })
    }
}

/// `r + gamma * q_next`, or just `r` at a terminal transition.
#[inline]
pub fn bellman_target(reward: f64, q_next: f64, done: bool, gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q_next
    }
}

fn single_row(obs: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row shape")
}

/// Actor output plus Gaussian noise, clamped to `[-1, 1]`.
pub fn act_normalized(actor: &Mlp, obs: &[f64], noise_mean: f64, noise_std: f64, rng: &mut impl Rng) -> Result<f64> {
    let out = actor.infer(single_row(obs).view(), None)?[[0, 0]];
    let noise = if noise_std > 0.0 {
        Normal::new(noise_mean, noise_std)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .sample(rng)
    } else {
        noise_mean
    };
    Ok((out + noise).clamp(-1.0, 1.0))
}

/// Exploratory command in m/s^2.
pub fn act(actor: &Mlp, obs: &[f64], noise_std: f64, u_max: f64, rng: &mut impl Rng) -> Result<f64> {
    Ok(act_normalized(actor, obs, 0.0, noise_std, rng)? * u_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub critic_loss: f64,
    /// Mean of `Q(s, mu(s))` over the batch.
    pub actor_objective: f64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    cfg: AgentConfig,
}

impl Agent {
    pub fn new(obs_dim: usize, cfg: AgentConfig) -> Result<Self> {
        cfg.validate()?;
        let (mut actor_spec, mut critic_spec) = (MlpSpec::actor(obs_dim, cfg.hidden), MlpSpec::critic(obs_dim, cfg.hidden));
        if !cfg.batch_norm {
            for spec in [&mut actor_spec, &mut critic_spec] {
                spec.input_norm = false;
                spec.hidden_norm.fill(false);
            }
        }
        let actor = Mlp::new(actor_spec, cfg.seed.wrapping_mul(4).wrapping_add(1))?;
        let critic = Mlp::new(critic_spec, cfg.seed.wrapping_mul(4).wrapping_add(2))?;
        Ok(Self {
            actor_opt: Adam::new(cfg.actor_lr, &actor),
            critic_opt: Adam::new(cfg.critic_lr, &critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            cfg,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    /// Bellman targets for a batch from the target networks.
    pub fn targets(&self, batch: &Batch) -> Result<Array1<f64>> {
        let next_actions = self.actor_target.infer(batch.next_obs.view(), None)?;
        let q_next = self
            .critic_target
            .infer(batch.next_obs.view(), Some(next_actions.view()))?;
        Ok(Array1::from_iter((0..batch.rewards.len()).map(|i| {
            bellman_target(batch.rewards[i], q_next[[i, 0]], batch.dones[i], self.cfg.gamma)
        })))
    }

    /// One critic regression step, one actor ascent step through the
    /// updated critic, then both target blends.
    pub fn train_step(&mut self, batch: &Batch) -> Result<TrainStats> {
        let n = batch.rewards.len() as f64;
        let y = self.targets(batch)?;

        let q = self
            .critic
            .forward(batch.obs.view(), Some(batch.actions.view()), Mode::Train)?;
        let diff = &q.column(0) - &y;
        let critic_loss = diff.mapv(|d| d * d).sum() / n;
        let upstream = (diff * (2.0 / n)).insert_axis(ndarray::Axis(1));
        let grads = self.critic.backward(upstream.view())?;
        self.critic_opt.update(&mut self.critic, &grads.params)?;

        let mu = self.actor.forward(batch.obs.view(), None, Mode::Train)?;
        let q_mu = self.critic.forward(batch.obs.view(), Some(mu.view()), Mode::Probe)?;
        let actor_objective = q_mu.sum() / n;
        let upstream = Array2::from_elem(q_mu.raw_dim(), -1.0 / n);
        let dq_da = self
            .critic
            .backward(upstream.view())?
            .side
            .expect("critic has an action input");
        let grads = self.actor.backward(dq_da.view())?;
        self.actor_opt.update(&mut self.actor, &grads.params)?;

        soft_update(&mut self.critic_target, &self.critic, self.cfg.blend)?;
        soft_update(&mut self.actor_target, &self.actor, self.cfg.blend)?;

        if !(critic_loss.is_finite() && actor_objective.is_finite()) {
            return Err(Error::NonFinite(format!(
                "critic loss {critic_loss}, actor objective {actor_objective}"
            )));
        }
        Ok(TrainStats {
            critic_loss,
            actor_objective,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    /// Undiscounted sum of clipped rewards.
    pub reward: f64,
    /// Environment steps taken when the episode ended.
    pub steps: usize,
}

/// Trailing moving average over `window` episodes.
pub fn moving_average(curve: &[CurvePoint], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(curve.len());
    let mut sum = 0.0;
    for (i, p) in curve.iter().enumerate() {
        sum += p.reward;
        if i >= window {
            sum -= curve[i - window].reward;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    pub buffer_len: usize,
}

/// Called after each finished episode with the curve so far; returning
/// `false` stops training early.
pub type EpisodeHook<'a> = dyn FnMut(&Agent, &[CurvePoint]) -> bool + 'a;

pub fn train(env_cfg: &EnvConfig, agent_cfg: &AgentConfig) -> Result<TrainOutcome> {
    train_with_hook(env_cfg, agent_cfg, &mut |_, _| true)
}

pub fn train_with_hook(env_cfg: &EnvConfig, agent_cfg: &AgentConfig, hook: &mut EpisodeHook<'_>) -> Result<TrainOutcome> {
    let mut env = Env::with_seed(env_cfg.clone(), agent_cfg.seed)?;
    let obs_dim = env_cfg.observation_len();
    let u_max = env_cfg.plant.u_max;
    let mut agent = Agent::new(obs_dim, agent_cfg.clone())?;
    let mut buffer = ReplayBuffer::new(agent_cfg.buffer_capacity, obs_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(agent_cfg.seed);
    let mut curve = Vec::new();
    let mut obs = env.reset();
    let mut episode_reward = 0.0;
    let mut steps = 0;

    while steps < agent_cfg.total_steps {
        let action = if steps < agent_cfg.warmup_steps {
            rng.random_range(-1.0..=1.0)
        } else {
            act_normalized(&agent.actor, &obs, agent_cfg.noise_mean, agent_cfg.noise_std, &mut rng)?
        };
        let res = env.step(action * u_max)?;
        episode_reward += res.reward;
        buffer.push(Transition {
            obs: obs.into_vec(),
            action,
            reward: res.reward,
            next_obs: res.observation.to_vec(),
            done: res.done,
        })?;
        steps += 1;

        if steps > agent_cfg.warmup_steps && buffer.len() >= agent_cfg.batch_size {
            let batch = buffer.sample(agent_cfg.batch_size, &mut rng)?;
            if let Err(e) = agent.train_step(&batch) {
                return Err(match e {
                    Error::NonFinite(reason) => Error::Diverged {
                        step: steps,
                        reason,
                        checkpoint: Box::new(agent.actor.clone()),
                    },
                    other => other,
                });
            }
        }

        if res.done {
            curve.push(CurvePoint {
                episode: curve.len(),
                reward: episode_reward,
                steps,
            });
            episode_reward = 0.0;
            obs = env.reset();
            if !hook(&agent, &curve) {
                break;
            }
        } else {
            obs = res.observation;
        }
    }
    Ok(TrainOutcome {
        buffer_len: buffer.len(),
        agent,
        curve,
        steps,
    })
}

/// Noise-free actor policy with inference-mode normalization.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    actor: Mlp,
    u_max: f64,
}

impl ActorPolicy {
    pub fn new(actor: Mlp, u_max: f64) -> Self {
        Self { actor, u_max }
    }

    pub fn command(&self, obs: &[f64]) -> Result<f64> {
        let out = self.actor.infer(single_row(obs).view(), None)?[[0, 0]];
        Ok(out.clamp(-1.0, 1.0) * self.u_max)
    }
}

impl Policy for ActorPolicy {
    fn act(&mut self, _step: usize, obs: &Observation) -> Result<f64> {
        self.command(obs)
    }
}

/// Runs an actor trained on one case against the plant of another. Only
/// the kinematic-to-anything transfer is supported: the richer observation
/// is cut down to `[e, e_dot]`. Same-case pairs pass observations through.
#[derive(Debug, Clone)]
pub struct CrossCaseAdapter {
    inner: ActorPolicy,
    keep: usize,
}

impl CrossCaseAdapter {
    pub fn new(actor: Mlp, trained_on: Case, target: Case, u_max: f64) -> Result<Self> {
        let keep = if trained_on == target {
            usize::MAX
        } else if trained_on == Case::Kinematic {
            2
        } else {
            return Err(Error::UnsupportedTransfer {
                from: trained_on.id(),
                to: target.id(),
            });
        };
        Ok(Self {
            inner: ActorPolicy::new(actor, u_max),
            keep,
        })
    }

    pub fn actor_input<'o>(&self, obs: &'o [f64]) -> &'o [f64] {
        &obs[..obs.len().min(self.keep)]
    }
}

impl Policy for CrossCaseAdapter {
    fn act(&mut self, _step: usize, obs: &Observation) -> Result<f64> {
        self.inner.command(self.actor_input(obs))
    }
}

/// Trained actor plus everything needed to rebuild its environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActorCheckpoint {
    pub format: String,
    pub case: Case,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub config_hash: String,
    pub actor: Mlp,
}

impl ActorCheckpoint {
    pub fn new(env: EnvConfig, agent: AgentConfig, actor: Mlp) -> Self {
        let config_hash = sha256_json(&(&env, &agent));
        Self {
            format: ACTOR_CHECKPOINT_FORMAT.into(),
            case: env.case,
            env,
            agent,
            config_hash,
            actor,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.format != ACTOR_CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                line: 0,
                message: format!("unknown actor checkpoint format {:?}", ck.format),
            });
        }
        if ck.actor.spec().input != ck.env.observation_len() {
            return Err(Error::Shape("checkpoint actor does not match its environment".into()));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rollout: Rollout,
}

/// Greedy, noise-free rollout of `actor` (trained on `trained_on`) in the
/// environment `env_cfg`, going through the cross-case adapter when the
/// cases differ.
pub fn evaluate(actor: &Mlp, trained_on: Case, env_cfg: &EnvConfig) -> Result<Evaluation> {
    let expected = if trained_on == env_cfg.case {
        env_cfg.observation_len()
    } else {
        2
    };
    if actor.spec().input != expected {
        return Err(Error::Shape(format!(
            "actor takes {} inputs, case {} needs {expected}",
            actor.spec().input,
            env_cfg.case
        )));
    }
    let mut policy = CrossCaseAdapter::new(actor.clone(), trained_on, env_cfg.case, env_cfg.plant.u_max)?;
    let mut env = Env::new(env_cfg.clone())?;
    Ok(Evaluation {
        rollout: rollout(&mut env, &mut policy)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bellman_examples() {
        assert!((bellman_target(-0.5, -10.0, false, 0.99) - (-10.4)).abs() < 1e-12);
        assert_eq!(bellman_target(-0.2, -123.0, true, 0.99), -0.2);
        assert_eq!(bellman_target(-0.2, f64::NAN, true, 0.99), -0.2);
    }

    #[test]
    fn case_defaults() {
        let c = AgentConfig::for_case(Case::DelayLag);
        assert_eq!((c.hidden, c.total_steps), (128, 1_500_000));
        let c = AgentConfig::for_case(Case::Lag);
        assert_eq!((c.hidden, c.total_steps), (64, 1_000_000));
        assert_eq!(c.buffer_capacity, 500_000);
        assert_eq!(c.batch_size, 64);
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut b = ReplayBuffer::new(3, 1);
        for i in 0..5 {
            b.push(Transition {
                obs: vec![i as f64],
                action: 0.0,
                reward: -(i as f64) / 10.0,
                next_obs: vec![i as f64 + 1.0],
                done: false,
            })
            .unwrap();
        }
        assert_eq!(b.len(), 3);
        let mut kept: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().obs[0]).collect();
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(4, &mut rng), Err(Error::InsufficientBuffer { .. })));
    }

    #[test]
    fn adapter_pairs() {
        let actor = Mlp::new(MlpSpec::actor(2, 4), 0).unwrap();
        let ad = CrossCaseAdapter::new(actor.clone(), Case::Kinematic, Case::DelayLag, 2.6).unwrap();
        assert_eq!(ad.actor_input(&[1.0, 2.0, 3.0, 4.0, 5.0]), &[1.0, 2.0]);
        let id = CrossCaseAdapter::new(actor.clone(), Case::Kinematic, Case::Kinematic, 2.6).unwrap();
        assert_eq!(id.actor_input(&[1.0, 2.0]), &[1.0, 2.0]);
        assert!(matches!(
            CrossCaseAdapter::new(actor, Case::Lag, Case::Delay, 2.6),
            Err(Error::UnsupportedTransfer { from: 3, to: 2 })
        ));
    }

    #[test]
    fn moving_average_window() {
        let curve: Vec<CurvePoint> = (0..5)
            .map(|i| CurvePoint {
                episode: i,
                reward: i as f64,
                steps: 200 * (i + 1),
            })
            .collect();
        assert_eq!(moving_average(&curve, 2), vec![0.0, 0.5, 1.5, 2.5, 3.5]);
    }
}
