use approx::assert_relative_eq;
use coagent::fixtures::{gridworld_network, asynchronous_fixtures, random_mdp, random_params, synchronous_fixtures};
use coagent::mdp::exact_objective;
use coagent::network::{softmax, softmax_logprob_gradient};
use coagent::reduction::{build_augmented_mdp, exact_network_objective, SyncNetwork};
use coagent::sync::{joint_policy, SyncView};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-300.0f64..300.0, 1..8)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn score_function_sums_to_zero(logits in prop::collection::vec(-20.0f64..20.0, 2..6), pick in 0usize..6) {
        let u = pick % logits.len();
        let g = softmax_logprob_gradient(&logits, u);
        assert_relative_eq!(g.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        prop_assert!(g[u] >= 0.0);
    }

    #[test]
    fn local_state_encoding_round_trips(exec in 0.1f64..1.0, i in 0usize..3, pick in 0usize..1000) {
        let f = gridworld_network(exec).unwrap();
        let row = pick % f.net.n_rows(i);
        let x = f.net.decode(i, row).unwrap();
        prop_assert_eq!(f.net.encode(i, &x).unwrap(), row);
    }

    #[test]
    fn synchronous_objective_survives_the_reduction(seed in 0u64..1000, scale in 0.0f64..3.0) {
        for f in synchronous_fixtures().unwrap() {
            let params = random_params(&f.net, scale, seed);
            let view = SyncView::new(&f.net, &params).unwrap();
            let direct = exact_objective(&f.mdp, &joint_policy(&view, &f.mdp)).unwrap();
            let reduced = exact_network_objective(&f.mdp, &f.net, &params).unwrap();
            assert_relative_eq!(direct, reduced, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn augmented_policy_rows_are_distributions(seed in 0u64..1000) {
        for f in asynchronous_fixtures().unwrap() {
            let params = random_params(&f.net, 2.0, seed);
            let aug = build_augmented_mdp(&f.mdp, &f.net).unwrap();
            let sync = SyncNetwork::new(&f.net, &aug, &params).unwrap();
            let policy = joint_policy(&sync, aug.mdp());
            for s in 0..aug.mdp().n_states() {
                assert_relative_eq!(policy.row(s).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn random_mdps_have_stochastic_transitions(n in 2usize..7, a in 1usize..4, seed in 0u64..500, terminal: bool) {
        let mdp = random_mdp(n, a, if terminal { 1.0 } else { 0.9 }, terminal, seed).unwrap();
        for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
            for act in 0..a {
                let total: f64 = (0..n).map(|t| mdp.transition(s, act, t)).sum();
                assert_relative_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }
}
