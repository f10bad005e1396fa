use carfollow::env::{self, rollout, StartJitter};
use carfollow::plant::{compute_k, plant_step, PlantConfig, PlantState};
use carfollow::{Case, Env, EnvConfig, Observation};
use proptest::prelude::*;

fn plant(lag: bool, delay: bool, phi: f64) -> PlantConfig {
    PlantConfig {
        lag_enabled: lag,
        delay_enabled: delay,
        phi,
        ..PlantConfig::default()
    }
}

fn command() -> impl Strategy<Value = f64> {
    -2.6..=2.6f64
}

fn case() -> impl Strategy<Value = Case> {
    prop::sample::select(Case::ALL.to_vec())
}

proptest! {
    #[test]
    fn delayed_commands_do_not_reach_the_acceleration(
        lag in any::<bool>(),
        k in 1usize..5,
        history in prop::collection::vec(command(), 1..30),
        tail in prop::collection::vec((command(), command()), 5),
    ) {
        let cfg = plant(lag, true, k as f64 * 0.1);
        prop_assert_eq!(cfg.delay_steps(), k);
        let mut s = PlantState::new(1.0, 0.5, 0.0, k);
        for &u in &history {
            s = plant_step(&s, u, &cfg).unwrap();
        }
        let (mut a, mut b) = (s.clone(), s);
        for &(u, v) in &tail[..k] {
            a = plant_step(&a, u, &cfg).unwrap();
            b = plant_step(&b, v, &cfg).unwrap();
            prop_assert_eq!(a.a.to_bits(), b.a.to_bits());
            prop_assert_eq!(a.e.to_bits(), b.e.to_bits());
            prop_assert_eq!(a.e_dot.to_bits(), b.e_dot.to_bits());
        }
    }

    #[test]
    fn lag_contracts_toward_a_constant_command(a0 in -2.6..2.6f64, u in command(), steps in 1usize..40) {
        let cfg = plant(true, false, 0.2);
        let factor = 1.0 - cfg.dt / cfg.tau;
        let mut s = PlantState::new(0.0, 0.0, a0, 0);
        for _ in 0..steps {
            let before = (s.a - u).abs();
            s = plant_step(&s, u, &cfg).unwrap();
            let after = (s.a - u).abs();
            prop_assert!((after - factor * before).abs() <= 1e-12 * (1.0 + before));
        }
    }

    #[test]
    fn queue_length_is_conserved(phi in 0.0..0.6f64, commands in prop::collection::vec(command(), 0..50)) {
        let delay = compute_k(phi, 0.1) > 0;
        let cfg = plant(false, delay, phi);
        let k = cfg.delay_steps();
        let mut s = PlantState::new(0.0, 0.0, 0.0, k);
        for &u in &commands {
            s = plant_step(&s, u, &cfg).unwrap();
            prop_assert_eq!(s.pending.len(), k);
            prop_assert!(s.pending.iter().all(|p| p.abs() <= 2.6));
        }
    }

    #[test]
    fn error_rate_follows_the_acceleration(
        c in case(),
        commands in prop::collection::vec(command(), 1..60),
    ) {
        let cfg = EnvConfig::for_case(c).plant_config();
        let mut s = PlantState::new(2.5, 2.5, 0.0, cfg.delay_steps());
        for &u in &commands {
            let n = plant_step(&s, u, &cfg).unwrap();
            let used = if c == Case::Kinematic { u } else { n.a };
            prop_assert_eq!(n.e_dot.to_bits(), (s.e_dot - cfg.dt * used).to_bits());
            prop_assert_eq!(n.e.to_bits(), (s.e + cfg.dt * s.e_dot).to_bits());
            s = n;
        }
    }

    #[test]
    fn rewards_and_observations_respect_the_contract(
        c in case(),
        dt in prop::sample::select(vec![0.05, 0.1, 0.2]),
        phi_steps in 1usize..4,
        actions in prop::collection::vec(-50.0..50.0f64, 200),
        e0 in -40.0..40.0f64,
    ) {
        let mut cfg = EnvConfig::for_case(c);
        cfg.plant.dt = dt;
        cfg.plant.phi = phi_steps as f64 * dt;
        cfg.scenario.e0 = e0;
        let k = compute_k(cfg.plant.phi, dt);
        let expected = match c {
            Case::Kinematic => 2,
            Case::Delay => 2 + k,
            Case::Lag => 3,
            Case::DelayLag => 3 + k,
        };
        let mut env = Env::new(cfg).unwrap();
        prop_assert_eq!(env.reset().len(), expected);
        for (i, &u) in actions.iter().enumerate() {
            let r = env.step(u).unwrap();
            prop_assert!((-1.0..=0.0).contains(&r.reward));
            prop_assert!(r.info.row.u.abs() <= 2.6);
            prop_assert_eq!(r.observation.len(), expected);
            prop_assert_eq!(r.done, i + 1 == 200);
        }
    }

    #[test]
    fn lag_case_matches_kinematics_when_acceleration_is_at_its_fixed_point(u in command(), steps in 1usize..50) {
        let lag = EnvConfig::for_case(Case::Lag).plant_config();
        let kin = EnvConfig::for_case(Case::Kinematic).plant_config();
        let mut a = PlantState::new(2.5, 2.5, u, 0);
        let mut b = a.clone();
        for _ in 0..steps {
            a = plant_step(&a, u, &lag).unwrap();
            b = plant_step(&b, u, &kin).unwrap();
            prop_assert_eq!((a.e, a.e_dot, a.a), (b.e, b.e_dot, b.a));
        }
    }

    #[test]
    fn rollouts_are_deterministic(c in case(), seed in any::<u64>(), gain in 0.0..2.0f64) {
        let mut cfg = EnvConfig::for_case(c);
        cfg.start_jitter = Some(StartJitter { e: 1.0, e_dot: 0.5 });
        let mut policy = |_: usize, o: &Observation| -gain * (o[0] + o[1]);
        let a = rollout(&mut Env::with_seed(cfg.clone(), seed).unwrap(), &mut policy).unwrap();
        let b = rollout(&mut Env::with_seed(cfg, seed).unwrap(), &mut policy).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn stepping_past_the_horizon_is_refused() {
    let mut env = Env::new(EnvConfig::default()).unwrap();
    for _ in 0..200 {
        env.step(0.0).unwrap();
    }
    assert!(matches!(env.step(0.0), Err(carfollow::Error::EpisodeFinished { steps: 200 })));
    assert_eq!(env::reward(1e6, 2.6, &EnvConfig::default()), -1.0);
}
