use carfollow::dp::{self, brute_force_cost, interpolate_table, ActionSet, Axis, DpConfig, DpStrategy, Grid};
use carfollow::{Case, EnvConfig};
use proptest::prelude::*;

fn small_instance() -> impl Strategy<Value = (EnvConfig, usize, usize)> {
    (
        prop::sample::select(Case::ALL.to_vec()),
        prop::sample::select(vec![3usize, 5]),
        1usize..=5,
        -3.0..3.0f64,
        25.0..35.0f64,
        0.6..0.95f64,
    )
        .prop_map(|(case, m, horizon, e0, v0, alpha)| {
            let mut cfg = EnvConfig::for_case(case);
            cfg.scenario.e0 = e0;
            cfg.scenario.v_follow0 = v0;
            cfg.scenario.episode_len = horizon;
            cfg.alpha = alpha;
            cfg.beta = 1.0 - alpha;
            (cfg, m, horizon)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn backward_induction_matches_exhaustive_search((cfg, m, horizon) in small_instance()) {
        let actions = ActionSet::new(m, cfg.plant.u_max).unwrap();
        let start = cfg.initial_state();
        // Shorten the horizon until the exact grid stays small.
        let mut horizon = horizon;
        let grid = loop {
            let g = Grid::reachable(&start, &actions, horizon, &cfg).unwrap();
            if g.cells() <= 1_000_000 || horizon == 1 {
                break g;
            }
            horizon -= 1;
        };
        let sol = dp::backward_induction(&grid, &actions, horizon, &cfg).unwrap();
        let (oracle, _) = brute_force_cost(&start, &actions, horizon, &cfg).unwrap();
        prop_assert_eq!(sol.start_cost.to_bits(), oracle.to_bits(), "dp {} vs brute force {}", sol.start_cost, oracle);
    }

    #[test]
    fn value_is_non_negative_and_shrinks_with_remaining_horizon(
        case in prop::sample::select(Case::ALL.to_vec()),
        horizon in 2usize..8,
    ) {
        let mut cfg = EnvConfig::for_case(case);
        cfg.scenario.episode_len = horizon;
        let dp_cfg = DpConfig {
            e_points: 21,
            e_dot_points: 11,
            a_points: 5,
            actions: 5,
            strategy: DpStrategy::Augmented,
            ..DpConfig::default()
        };
        let sol = dp::solve(&cfg, &dp_cfg).unwrap();
        for t in 0..horizon {
            let next = sol.values.get(t + 1);
            for (i, &v) in sol.values[t].iter().enumerate() {
                prop_assert!(v >= 0.0);
                let later = next.map_or(0.0, |n| n[i]);
                prop_assert!(v >= later, "V_{} = {} < V_{} = {}", t, v, t + 1, later);
            }
        }
    }

    #[test]
    fn interpolation_reproduces_nodes_and_averages_neighbours(
        values in prop::collection::vec(-100.0..100.0f64, 4 * 3 * 5),
        i in 0usize..4, j in 0usize..3, l in 0usize..4,
    ) {
        let grid = Grid::new(
            vec![
                Axis::uniform(-1.0, 2.0, 4).unwrap(),
                Axis::uniform(0.0, 1.0, 3).unwrap(),
                Axis::uniform(-2.6, 2.6, 5).unwrap(),
            ],
            true,
            0,
        )
        .unwrap();
        let p = |d: usize, n: usize| grid.axes()[d].points()[n];
        let flat = |a: usize, b: usize, c: usize| values[(a * 3 + b) * 5 + c];
        let node = interpolate_table(&grid, &values, &[p(0, i), p(1, j), p(2, l)]).unwrap();
        prop_assert_eq!(node, flat(i, j, l));
        let mid = 0.5 * (p(2, l) + p(2, l + 1));
        let got = interpolate_table(&grid, &values, &[p(0, i), p(1, j), mid]).unwrap();
        let want = 0.5 * (flat(i, j, l) + flat(i, j, l + 1));
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
}

#[test]
fn predictive_and_augmented_agree_on_a_small_delay_grid() {
    for case in [Case::Delay, Case::DelayLag] {
        let mut cfg = EnvConfig::for_case(case);
        cfg.scenario.episode_len = 6;
        let base = DpConfig {
            e_points: 41,
            e_dot_points: 21,
            a_points: 7,
            actions: 7,
            ..DpConfig::default()
        };
        let pred = dp::solve(&cfg, &base).unwrap();
        let aug = dp::solve(
            &cfg,
            &DpConfig {
                strategy: DpStrategy::Augmented,
                ..base
            },
        )
        .unwrap();
        let a = dp::dp_rollout(&pred, &cfg).unwrap().rollout;
        let b = dp::dp_rollout(&aug, &cfg).unwrap().rollout;
        // Same exact plant, interpolation on different grids: close costs.
        assert!((a.episode_cost - b.episode_cost).abs() < 0.05 * b.episode_cost.max(0.1), "case {case}: {} vs {}", a.episode_cost, b.episode_cost);
    }
}

#[test]
fn brute_force_refuses_large_instances() {
    let cfg = EnvConfig::default();
    let actions = ActionSet::new(27, 2.6).unwrap();
    assert!(matches!(
        brute_force_cost(&cfg.initial_state(), &actions, 6, &cfg),
        Err(carfollow::Error::BudgetExceeded { .. })
    ));
}
