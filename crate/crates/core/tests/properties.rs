use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vmbpo::checks::{random_policy, random_sub_dynamics, random_sub_policy};
use vmbpo::dp::{em_solve, value_iteration, EStepMethod, SolverConfig};
use vmbpo::envs::make_random_mdp;
use vmbpo::mdp::{discount_transform, expected_return, FiniteMdp};
use vmbpo::oracle::project_to_simplex;
use vmbpo::tables::{TabularDynamics, Temperature};
use vmbpo::util::{kl_divergence, log_weighted_sum_exp, logsumexp};
use vmbpo::variational::{elbo_exact, log_partition, twist_row, OperatorMode};

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 1..6).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

fn weighted_values() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    distribution().prop_flat_map(|p| {
        let n = p.len();
        (Just(p), prop::collection::vec(-30.0f64..30.0, n))
    })
}

fn mdp_instance() -> impl Strategy<Value = (FiniteMdp, u64)> {
    (3usize..=7, 1usize..=3, any::<u64>()).prop_flat_map(|(n, m, seed)| {
        (1..n).prop_map(move |layers| (make_random_mdp(n, m, layers, seed).unwrap(), seed))
    })
}

fn eta() -> Temperature {
    Temperature::new(1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn twisted_row_is_a_distribution_proportional_to_base((p, w) in weighted_values()) {
        let q = twist_row(&p, &w);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let z = log_partition(&p, &w);
        for i in 0..p.len() {
            prop_assert!((q[i] - p[i] * (w[i] - z).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_partition_is_the_variational_maximum((p, w) in weighted_values(), noise in distribution()) {
        // log E_p e^w = max_q E_q w - KL(q || p), attained at the twist.
        let z = log_partition(&p, &w);
        let q = twist_row(&p, &w);
        let at = |r: &[f64]| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - kl_divergence(r, &p);
        prop_assert!((at(&q) - z).abs() < 1e-9);
        if noise.len() == p.len() {
            prop_assert!(at(&noise) <= z + 1e-12);
        }
    }

    #[test]
    fn log_partition_lies_between_mean_and_max((p, w) in weighted_values()) {
        let z = log_partition(&p, &w);
        let mean: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum();
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(z >= mean - 1e-12 && z <= max + 1e-12);
    }

    #[test]
    fn weighted_logsumexp_shifts((p, w) in weighted_values(), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = w.iter().map(|x| x + c).collect();
        prop_assert!((log_weighted_sum_exp(&p, &shifted) - log_weighted_sum_exp(&p, &w) - c).abs() < 1e-9);
        let uniform = vec![1.0; w.len()];
        prop_assert!((log_weighted_sum_exp(&uniform, &w) - logsumexp(&w)).abs() < 1e-12);
    }

    #[test]
    fn simplex_projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = project_to_simplex(&v);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let again = project_to_simplex(&p);
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn soft_value_dominates_expected_return((mdp, seed) in mdp_instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), false, &mut rng);
        let sol = value_iteration(&mdp, eta(), &pi, OperatorMode::ModelFree, &SolverConfig::default()).unwrap();
        prop_assert!(sol.log_likelihood(&mdp) >= expected_return(&mdp, &pi).unwrap() - 1e-10);
    }

    #[test]
    fn elbo_of_the_prior_is_the_expected_return((mdp, seed) in mdp_instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        let elbo = elbo_exact(&mdp, eta(), &pi, &TabularDynamics::from_mdp(&mdp), &pi).unwrap();
        prop_assert!((elbo - expected_return(&mdp, &pi).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn elbo_never_exceeds_the_log_likelihood((mdp, seed) in mdp_instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        let sol = value_iteration(&mdp, eta(), &pi, OperatorMode::ModelBased, &SolverConfig::default()).unwrap();
        let ll = sol.log_likelihood(&mdp);
        let qc = random_sub_policy(&pi, &mut rng);
        let qd = random_sub_dynamics(&mdp, &mut rng);
        prop_assert!(elbo_exact(&mdp, eta(), &qc, &qd, &pi).unwrap() <= ll + 1e-10);
        let at_optimum = elbo_exact(&mdp, eta(), &sol.q_c_star, &sol.q_d_star, &pi).unwrap();
        prop_assert!((at_optimum - ll).abs() < 1e-8);
    }

    #[test]
    fn em_log_likelihood_is_nondecreasing((mdp, seed) in mdp_instance(), lambda in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), false, &mut rng);
        let recs = em_solve(
            &mdp, eta(), &pi, 4, lambda, &SolverConfig::default(),
            EStepMethod::ValueIteration, OperatorMode::ModelFree,
        ).unwrap();
        for w in recs.windows(2) {
            prop_assert!(w[1].log_likelihood >= w[0].log_likelihood - 1e-9);
        }
    }

    #[test]
    fn discounting_keeps_the_model_valid((mdp, _seed) in mdp_instance(), gamma in 0.05f64..0.99) {
        let d = discount_transform(&mdp, gamma).unwrap();
        prop_assert!(d.validate().is_empty());
        for x in mdp.nonterminal_states() {
            for a in 0..mdp.n_actions() {
                for y in 0..mdp.n_states() {
                    prop_assert!((d.transition(x, a, y) - gamma * mdp.transition(x, a, y)).abs() < 1e-12
                        || mdp.is_terminal(y));
                }
            }
        }
    }

    #[test]
    fn mdp_json_round_trips((mdp, _seed) in mdp_instance()) {
        let back = FiniteMdp::from_json_str(&mdp.to_json_string().unwrap()).unwrap();
        prop_assert_eq!(back, mdp);
    }
}
