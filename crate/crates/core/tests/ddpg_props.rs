mod common;

use carfollow::ddpg::{self, act, act_normalized, Agent, AgentConfig, Batch, ReplayBuffer, Transition};
use carfollow::nn::{Mlp, MlpSpec, Mode};
use carfollow::{Case, EnvConfig};
use common::rel_err;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn transition(i: usize, done: bool) -> Transition {
    Transition {
        obs: vec![i as f64, 0.5],
        action: 0.1,
        reward: -0.25,
        next_obs: vec![i as f64 + 1.0, 0.4],
        done,
    }
}

fn batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, done: bool) -> Batch {
    Batch {
        obs: Array2::from_shape_fn((n, dim), |_| rng.random_range(-5.0..5.0)),
        actions: Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0)),
        rewards: Array1::from_shape_fn(n, |_| rng.random_range(-1.0..0.0)),
        next_obs: Array2::from_shape_fn((n, dim), |_| rng.random_range(-5.0..5.0)),
        dones: vec![done; n],
    }
}

#[test]
fn replay_sampling_is_uniform() {
    let n = 100;
    let mut buf = ReplayBuffer::new(n, 2);
    for i in 0..n {
        buf.push(transition(i, false)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 1_000_000;
    let mut counts = vec![0u64; n];
    for _ in 0..draws {
        counts[buf.sample_index(&mut rng)] += 1;
    }
    // Pearson statistic over all slots: chi-square with n - 1 degrees of
    // freedom, accepted within three of its standard deviations.
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = (n - 1) as f64;
    assert!((chi2 - dof).abs() <= 3.0 * (2.0 * dof).sqrt(), "chi2 {chi2} with {dof} dof");
    // No single slot strays beyond a Bonferroni-style band either.
    let sigma = (expected * (1.0 - 1.0 / n as f64)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - expected).abs() <= 4.5 * sigma, "slot {i}: {c} vs {expected}");
    }
}

#[test]
fn full_buffer_evicts_oldest_and_never_grows() {
    let mut buf = ReplayBuffer::new(5, 2);
    for i in 0..12 {
        buf.push(transition(i, false)).unwrap();
        assert!(buf.len() <= 5);
    }
    let kept: Vec<f64> = (0..5).map(|i| buf.get(i).unwrap().obs[0]).collect();
    let mut sorted = kept.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(sorted, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
    assert_eq!(buf.inserted(), 12);
}

#[test]
fn terminal_targets_ignore_the_target_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = AgentConfig {
        hidden: 8,
        total_steps: 10,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(2, cfg).unwrap();
    let b = batch(&mut rng, 16, 2, true);
    let before = agent.targets(&b).unwrap();
    assert_eq!(before, b.rewards);
    for p in agent.critic_target.params_mut() {
        for v in p.iter_mut() {
            *v += 1.0;
        }
    }
    assert_eq!(agent.targets(&b).unwrap(), before);
    let live = batch(&mut rng, 16, 2, false);
    assert_ne!(agent.targets(&live).unwrap(), live.rewards);
}

#[test]
fn actor_gradient_ascends_the_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut actor = Mlp::new(MlpSpec::actor(3, 6), 1).unwrap();
    let mut critic = Mlp::new(MlpSpec::critic(3, 6), 2).unwrap();
    for net in [&mut actor, &mut critic] {
        for p in net.params_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let obs = Array2::from_shape_fn((6, 3), |_| rng.random_range(-2.0..2.0));
    let frozen = critic.clone();
    let objective = |actor: &Mlp| {
        let mut a = actor.clone();
        let mut c = frozen.clone();
        let mu = a.forward(obs.view(), None, Mode::Probe).unwrap();
        c.forward(obs.view(), Some(mu.view()), Mode::Probe).unwrap().mean().unwrap()
    };
    let mu = actor.forward(obs.view(), None, Mode::Probe).unwrap();
    let q = critic.forward(obs.view(), Some(mu.view()), Mode::Probe).unwrap();
    let up = Array2::from_elem(q.raw_dim(), 1.0 / 6.0);
    let dq_da = critic.backward(up.view()).unwrap().side.unwrap();
    let grads = actor.backward(dq_da.view()).unwrap();
    let h = 1e-5;
    let lens: Vec<usize> = actor.params().iter().map(|p| p.len()).collect();
    for (t, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let mut plus = actor.clone();
            plus.params_mut()[t][i] += h;
            let mut minus = actor.clone();
            minus.params_mut()[t][i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grads.params[t][i];
            assert!(rel_err(an, fd) < 1e-4, "tensor {t} entry {i}: {an} vs {fd}");
        }
    }
}

#[test]
fn training_is_reproducible_and_bookkeeping_is_consistent() {
    let env = EnvConfig::default();
    let cfg = AgentConfig {
        hidden: 16,
        total_steps: 2_000,
        warmup_steps: 500,
        seed: 42,
        ..AgentConfig::for_case(Case::Kinematic)
    };
    let a = ddpg::train(&env, &cfg).unwrap();
    let b = ddpg::train(&env, &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.agent.actor, b.agent.actor);
    assert_eq!(a.agent.critic, b.agent.critic);
    assert_eq!(a.curve.len(), 2_000 / 200);
    assert_eq!(a.steps, 2_000);
    assert_eq!(a.buffer_len, 2_000);
    assert!(a.curve.iter().all(|p| (-200.0..=0.0).contains(&p.reward)));
    let c = ddpg::train(&env, &AgentConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.agent.actor, c.agent.actor);
}

proptest! {
    #[test]
    fn exploratory_commands_stay_within_limits(
        obs in prop::collection::vec(-100.0..100.0f64, 2),
        std in 0.0..5.0f64,
        seed in any::<u64>(),
    ) {
        let actor = Mlp::new(MlpSpec::actor(2, 8), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = act_normalized(&actor, &obs, 0.0, std, &mut rng).unwrap();
        prop_assert!((-1.0..=1.0).contains(&n));
        let u = act(&actor, &obs, std, 2.6, &mut rng).unwrap();
        prop_assert!(u.abs() <= 2.6);
    }
}
