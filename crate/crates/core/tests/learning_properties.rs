use parlab::datagen::{make_behavior, sample_dataset, BehaviorSpec, Regime, SamplingMode};
use parlab::decmdp::{DecMdp, QTable};
use parlab::harness::verify::{random_batch, random_q};
use parlab::learners::{compute_weights, k_eff, Algorithm, LearnerConfig, QEnsemble, Trainer};
use parlab::operators::{
    averaged_individual_exact, individual_backup_exact, k_backup_exact, soft_partial_exact,
};
use parlab::random::{dirichlet_uniform, random_factorized_policy, random_joint_policy, random_mdp, stream_rng, InstanceShape};
use parlab::theory::{gradient_equivalence_check, value_error_bound, value_error_bound_corr, GradientMode};
use proptest::prelude::*;
use rand::Rng;

fn instance(seed: u64, states: usize, counts: Vec<usize>, gamma: f64) -> DecMdp {
    random_mdp(&InstanceShape::new(states, counts, gamma), &mut stream_rng(seed, &[1]))
}

fn shapes() -> impl Strategy<Value = (u64, usize, Vec<usize>, f64)> {
    (
        any::<u64>(),
        1usize..=4,
        prop::collection::vec(1usize..=3, 1..=3),
        prop::sample::select(vec![0.5, 0.9, 0.95]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_partial_iteration_contracts((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts.clone(), gamma);
        let mut rng = stream_rng(seed, &[2]);
        let pi = random_factorized_policy(ns, &counts, &mut rng);
        let mu = random_factorized_policy(ns, &counts, &mut rng);
        let w = dirichlet_uniform(counts.len(), &mut rng);
        let mut prev = QTable::for_mdp(&m);
        let mut cur = soft_partial_exact(&m, &prev, &pi, &mu, &w).unwrap();
        for _ in 0..30 {
            let next = soft_partial_exact(&m, &cur, &pi, &mu, &w).unwrap();
            prop_assert!(next.sup_dist(&cur) <= gamma * cur.sup_dist(&prev) + 1e-12);
            prev = cur;
            cur = next;
        }
    }

    #[test]
    fn soft_partial_is_affine_in_weights((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts.clone(), gamma);
        let mut rng = stream_rng(seed, &[3]);
        let pi = random_factorized_policy(ns, &counts, &mut rng);
        let mu = random_factorized_policy(ns, &counts, &mut rng);
        let q = random_q(&m, &mut rng);
        let wa = dirichlet_uniform(counts.len(), &mut rng);
        let wb = dirichlet_uniform(counts.len(), &mut rng);
        let mid: Vec<f64> = wa.iter().zip(&wb).map(|(a, b)| 0.5 * (a + b)).collect();
        let qa = soft_partial_exact(&m, &q, &pi, &mu, &wa).unwrap();
        let qb = soft_partial_exact(&m, &q, &pi, &mu, &wb).unwrap();
        let qm = soft_partial_exact(&m, &q, &pi, &mu, &mid).unwrap();
        for i in 0..qm.values.len() {
            prop_assert!((qm.values[i] - 0.5 * (qa.values[i] + qb.values[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_operators_are_monotone((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts.clone(), gamma);
        let mut rng = stream_rng(seed, &[4]);
        let pi = random_factorized_policy(ns, &counts, &mut rng);
        let mu = random_factorized_policy(ns, &counts, &mut rng);
        let q1 = random_q(&m, &mut rng);
        let mut q2 = q1.clone();
        q2.values.iter_mut().for_each(|v| *v += rng.random_range(0.0..1.0));
        let n = counts.len();
        let w = dirichlet_uniform(n, &mut rng);
        let mut pairs = vec![
            (soft_partial_exact(&m, &q1, &pi, &mu, &w).unwrap(), soft_partial_exact(&m, &q2, &pi, &mu, &w).unwrap()),
            (averaged_individual_exact(&m, &q1, &pi, &mu).unwrap(), averaged_individual_exact(&m, &q2, &pi, &mu).unwrap()),
        ];
        for i in 0..n {
            pairs.push((individual_backup_exact(&m, &q1, &pi, &mu, i).unwrap(), individual_backup_exact(&m, &q2, &pi, &mu, i).unwrap()));
            pairs.push((k_backup_exact(&m, &q1, &pi, &mu, i + 1).unwrap(), k_backup_exact(&m, &q2, &pi, &mu, i + 1).unwrap()));
        }
        for (a, b) in pairs {
            prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| x <= y));
        }
    }

    #[test]
    fn weights_are_a_distribution(u in prop::collection::vec(0.0f64..5.0, 1..=5)) {
        let w = compute_weights(&u, 1e-6).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        let k = k_eff(&w);
        prop_assert!(k >= 1.0 - 1e-12 && k <= u.len() as f64 + 1e-12);
    }

    #[test]
    fn raising_uncertainty_never_raises_weight(u in prop::collection::vec(0.0f64..5.0, 1..=5), which in any::<usize>(), bump in 0.0f64..3.0) {
        let k = which % u.len();
        let mut v = u.clone();
        v[k] += bump;
        let (a, b) = (compute_weights(&u, 1e-6).unwrap(), compute_weights(&v, 1e-6).unwrap());
        prop_assert!(b[k] <= a[k] + 1e-15);
    }

    #[test]
    fn ensemble_min_below_mean(seed in any::<u64>(), size in 2usize..6, s in 0usize..3, a in 0usize..4) {
        let e = QEnsemble::new(3, 4, 0.9, size, 0.5, seed);
        prop_assert!(e.min_target(s, a) <= e.mean_target(s, a) + 1e-15);
    }

    #[test]
    fn value_error_bounds_hold((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts.clone(), gamma);
        let mut rng = stream_rng(seed, &[5]);
        let pi = random_factorized_policy(ns, &counts, &mut rng);
        let mu = random_factorized_policy(ns, &counts, &mut rng);
        let q = random_q(&m, &mut rng);
        prop_assert!(value_error_bound(&m, &pi, &mu, &q).unwrap().holds);
        let mu_joint = random_joint_policy(ns, m.n_joint(), &mut rng);
        prop_assert!(value_error_bound_corr(&m, &pi, &mu_joint, &q).unwrap().holds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn semi_gradients_always_agree((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts.clone(), gamma);
        let mut rng = stream_rng(seed, &[6]);
        let pi = random_factorized_policy(ns, &counts, &mut rng);
        let mu = random_factorized_policy(ns, &counts, &mut rng);
        let q = random_q(&m, &mut rng);
        let batch = random_batch(&m, &mut rng);
        let c = gradient_equivalence_check(&m, &batch, &q, &pi, &mu, GradientMode::Semi).unwrap();
        prop_assert!(c.deviation <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_steps_keep_invariants(
        seed in any::<u64>(),
        algo in prop::sample::select(Algorithm::ALL.to_vec()),
        counts in prop::collection::vec(2usize..=3, 1..=3),
    ) {
        let m = instance(seed, 4, counts, 0.9);
        let spec = BehaviorSpec::new(Regime::Random, seed);
        let b = make_behavior(&m, &spec).unwrap();
        let ds = sample_dataset(&m, &b, &spec, 64, SamplingMode::Trajectory, seed).unwrap();
        let config = LearnerConfig { ensemble_size: 3, batch_size: 8, steps: 25, seed, lr_q: 0.5, ..LearnerConfig::default() };
        let tau = config.tau;
        let mut t = Trainer::new(&ds, 0.9, algo, config, None).unwrap();
        let limit = 2.0 / (1.0 - 0.9) + 1e-12;
        for _ in 0..25 {
            let before = t.ensemble().clone();
            let log = t.step().unwrap().clone();
            prop_assert!((log.w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(log.w.iter().all(|x| *x >= 0.0));
            prop_assert!(log.k_eff >= 1.0 - 1e-12 && log.k_eff <= m.n_agents as f64 + 1e-12);
            prop_assert!(log.max_range <= limit);
            let after = t.ensemble();
            for j in 0..after.size() {
                prop_assert!(after.members[j].range() <= limit);
                // Targets move only by the Polyak step toward the updated members.
                let gap = after.members[j].sup_dist(&before.targets[j]);
                prop_assert!(after.targets[j].sup_dist(&before.targets[j]) <= tau * gap + 1e-12);
            }
        }
    }
}
