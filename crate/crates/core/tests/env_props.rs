use cvarrl::env::{
    make_tabular_lowrank, rollout_augmented, wrap_discretized_policy, AugmentedPolicy, Instance, LowRankModel,
    RewardModel, TabularSpec,
};
use cvarrl::props::random_policy;
use cvarrl::risk::BudgetGrid;
use cvarrl::rng::{seeded, stream};
use proptest::prelude::*;
use rand::Rng;

fn assert_valid(model: &LowRankModel, rewards: &RewardModel) {
    let grid = BudgetGrid::new(rewards.upsilon(), model.horizon()).unwrap();
    for h in 0..model.horizon() {
        for s in 0..model.num_states() {
            for a in 0..model.num_actions() {
                let row = model.transition_dist(h, s, a).unwrap();
                assert_eq!(row.len(), model.num_states());
                assert!(row.iter().all(|p| (0.0..=1.0 + 1e-12).contains(p)));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                let pmf = rewards.pmf(h, s, a);
                assert!((pmf.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for (i, p) in pmf.iter().enumerate() {
                    assert!(*p >= 0.0);
                    if *p > 0.0 {
                        assert!(grid.value(i) <= 1.0 + 1e-9, "reward level {i} above 1");
                    }
                }
            }
        }
    }
}

#[test]
fn generated_instances_are_valid() {
    let mut rng = seeded(11);
    for _ in 0..1000 {
        let spec = TabularSpec {
            num_states: rng.random_range(1..=5),
            num_actions: rng.random_range(1..=4),
            horizon: rng.random_range(1..=4),
            upsilon: [0.1, 0.2, 0.25, 0.5, 0.3][rng.random_range(0..5)],
            dirichlet_alpha: [0.1, 1.0, 5.0][rng.random_range(0..3)],
        };
        let (model, rewards) = make_tabular_lowrank(&spec, &mut rng).unwrap();
        assert_valid(&model, &rewards);
        assert!(model.is_tabular());
    }
}

#[test]
fn rollouts_conserve_budget_and_stay_in_support() {
    let mut rng = seeded(12);
    let (model, rewards) = make_tabular_lowrank(&TabularSpec::default(), &mut rng).unwrap();
    let grid = BudgetGrid::new(0.1, 3).unwrap();
    let policy = random_policy(grid, 3, 2, &mut rng);
    for episode in 0..500 {
        let c1 = grid.value(episode % grid.len());
        let traj = if episode % 2 == 0 {
            rollout_augmented(&model, &rewards, &mut policy.raw(), c1, &mut rng)
        } else {
            rollout_augmented(&model, &rewards, &mut wrap_discretized_policy(&policy, c1), c1, &mut rng)
        };
        assert_eq!(traj.steps.len(), 3);
        let mut residual = c1;
        let mut state = 0;
        for (h, step) in traj.steps.iter().enumerate() {
            assert_eq!(step.budget, residual, "budget drift at step {h}");
            assert_eq!(step.state, state);
            assert!(model.transition_row(h, step.state, step.action)[step.next_state] > 0.0);
            let level = grid.on_grid_index(step.reward).expect("rewards are on the grid");
            assert!(rewards.pmf(h, step.state, step.action)[level] > 0.0);
            residual -= step.reward;
            state = step.next_state;
        }
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let (model, rewards) = make_tabular_lowrank(&TabularSpec::default(), &mut seeded(3)).unwrap();
    let grid = BudgetGrid::new(0.1, 3).unwrap();
    let policy = AugmentedPolicy::uniform(grid, 3, 2);
    let episodes = |seed| {
        let mut rng = stream(seed, &[0]);
        let trajs: Vec<_> =
            (0..50).map(|_| rollout_augmented(&model, &rewards, &mut policy.raw(), 1.5, &mut rng)).collect();
        serde_json::to_string(&trajs).unwrap()
    };
    assert_eq!(episodes(9), episodes(9));
    assert_ne!(episodes(9), episodes(10));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instance_json_round_trips(seed in any::<u64>(), states in 1usize..5, actions in 1usize..4, horizon in 1usize..4) {
        let spec = TabularSpec { num_states: states, num_actions: actions, horizon, ..TabularSpec::default() };
        let (model, rewards) = make_tabular_lowrank(&spec, &mut seeded(seed)).unwrap();
        let inst = Instance::new(model, rewards).unwrap();
        let back = Instance::from_json(&inst.to_json()).unwrap();
        prop_assert_eq!(back.to_json(), inst.to_json());
        prop_assert_eq!(back, inst);
    }

    #[test]
    fn policy_rows_are_distributions(seed in any::<u64>(), upsilon in prop::sample::select(vec![0.1, 0.25, 0.5])) {
        let grid = BudgetGrid::new(upsilon, 2).unwrap();
        let policy = random_policy(grid, 2, 3, &mut seeded(seed));
        for h in 0..2 {
            for s in 0..2 {
                for i in 0..grid.len() {
                    prop_assert!((policy.probs(h, s, i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}
