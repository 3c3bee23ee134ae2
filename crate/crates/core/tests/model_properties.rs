use parlab::datagen::{empirical_conditionals, make_behavior, sample_dataset, BehaviorSpec, Regime, SamplingMode};
use parlab::decmdp::{evaluate_policy_q, greedy_joint, policy_value, solve_q_star, DecMdp, JointActionSpace};
use parlab::occupancy::{check_linear_divergence, occupancy, occupancy_w1};
use parlab::policies::{excess_correlation, mixed_policy, product_policy, tv_distance, JointPolicy};
use parlab::random::{random_factorized_policy, random_joint_policy, random_mdp, stream_rng, InstanceShape};
use proptest::prelude::*;

fn instance(seed: u64, states: usize, counts: Vec<usize>, gamma: f64) -> DecMdp {
    random_mdp(&InstanceShape::new(states, counts, gamma), &mut stream_rng(seed, &[1]))
}

fn shapes() -> impl Strategy<Value = (u64, usize, Vec<usize>, f64)> {
    (
        any::<u64>(),
        1usize..=5,
        prop::collection::vec(1usize..=3, 1..=3),
        prop::sample::select(vec![0.5, 0.9, 0.95]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn joint_encoding_round_trips(counts in prop::collection::vec(1usize..=4, 1..=4), pick in any::<u64>()) {
        let space = JointActionSpace::new(&counts);
        let a = (pick as usize) % space.size();
        prop_assert_eq!(space.encode(&space.decode(a)), a);
    }

    #[test]
    fn q_star_bounded_and_greedy_consistent((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts, gamma);
        let tol = 1e-9;
        let q = solve_q_star(&m, tol).unwrap();
        prop_assert!(q.max_abs() <= 1.0 / (1.0 - gamma) + tol);
        let qg = evaluate_policy_q(&m, &greedy_joint(&q)).unwrap();
        prop_assert!(qg.sup_dist(&q) <= 10.0 * tol);
    }

    #[test]
    fn policy_value_linear_in_reward((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts, gamma);
        let pi = random_joint_policy(m.n_states, m.n_joint(), &mut stream_rng(seed, &[2]));
        let mut half = m.clone();
        half.reward.iter_mut().for_each(|r| *r *= 0.5);
        let (v, vh) = (policy_value(&m, &pi).unwrap(), policy_value(&half, &pi).unwrap());
        prop_assert!((0.5 * v - vh).abs() <= 1e-9);
    }

    #[test]
    fn mixed_rows_within_per_state_tv_sum((seed, ns, counts, _g) in shapes(), mask in any::<u8>()) {
        let mut rng = stream_rng(seed, &[3]);
        let pi = random_factorized_policy(ns, &counts, &mut rng);
        let mu = random_factorized_policy(ns, &counts, &mut rng);
        let subset: Vec<usize> = (0..counts.len()).filter(|i| mask >> i & 1 == 1).collect();
        let mixed = mixed_policy(&pi, &mu, &subset).unwrap();
        let base = product_policy(&mu);
        for s in 0..ns {
            let lhs = tv_distance(mixed.row(s), base.row(s)).unwrap();
            let rhs: f64 = subset.iter().map(|&i| tv_distance(pi.row(i, s), mu.row(i, s)).unwrap()).sum();
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn excess_correlation_ignores_agent_order((seed, ns, counts, _g) in shapes()) {
        let space = JointActionSpace::new(&counts);
        let joint = random_joint_policy(ns, space.size(), &mut stream_rng(seed, &[4]));
        let rev_counts: Vec<usize> = counts.iter().rev().copied().collect();
        let rev = JointActionSpace::new(&rev_counts);
        let mut probs = vec![0.0; ns * space.size()];
        for s in 0..ns {
            for a in 0..space.size() {
                let mut acts = space.decode(a);
                acts.reverse();
                probs[s * space.size() + rev.encode(&acts)] = joint.prob(s, a);
            }
        }
        let permuted = JointPolicy::from_probs(ns, space.size(), probs);
        let k1 = excess_correlation(&joint, &joint.marginals(&counts).unwrap(), true).unwrap();
        let k2 = excess_correlation(&permuted, &permuted.marginals(&rev_counts).unwrap(), true).unwrap();
        prop_assert!((k1 - k2).abs() <= 1e-12);
    }

    #[test]
    fn product_then_marginalize_is_identity((seed, ns, counts, _g) in shapes()) {
        let fp = random_factorized_policy(ns, &counts, &mut stream_rng(seed, &[5]));
        let back = product_policy(&fp).marginals(&counts).unwrap();
        for i in 0..counts.len() {
            for s in 0..ns {
                for (x, y) in back.row(i, s).iter().zip(fp.row(i, s)) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn occupancy_is_a_fixed_point_distribution((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts, gamma);
        let phi = random_joint_policy(ns, m.n_joint(), &mut stream_rng(seed, &[6]));
        let d = occupancy(&m, &phi).unwrap().dist;
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!(d.iter().all(|x| *x >= 0.0));
        for s2 in 0..ns {
            let mut flow = 0.0;
            for s in 0..ns {
                for a in 0..m.n_joint() {
                    flow += d[s] * phi.prob(s, a) * m.p(s, a, s2);
                }
            }
            prop_assert!(((1.0 - gamma) * m.initial_dist[s2] + gamma * flow - d[s2]).abs() < 1e-9);
        }
    }

    #[test]
    fn telescoping_triangle_inequality((seed, ns, counts, gamma) in shapes()) {
        let m = instance(seed, ns, counts.clone(), gamma);
        let mut rng = stream_rng(seed, &[7]);
        let pi = random_factorized_policy(ns, &counts, &mut rng);
        let mu = random_factorized_policy(ns, &counts, &mut rng);
        let n = counts.len();
        let chain: Vec<JointPolicy> = (0..=n)
            .map(|j| mixed_policy(&pi, &mu, &(0..j).collect::<Vec<_>>()).unwrap())
            .collect();
        let direct = occupancy_w1(&m, &chain[0], &chain[n]).unwrap();
        let hops: f64 = chain.windows(2).map(|w| occupancy_w1(&m, &w[0], &w[1]).unwrap()).sum();
        prop_assert!(direct <= hops + 1e-12);
    }

    #[test]
    fn divergence_rhs_grows_by_agent_tv((seed, ns, counts, gamma) in shapes(), mask in any::<u8>()) {
        let m = instance(seed, ns, counts.clone(), gamma);
        let mut rng = stream_rng(seed, &[8]);
        let pi = random_factorized_policy(ns, &counts, &mut rng);
        let mu = random_factorized_policy(ns, &counts, &mut rng);
        let n = counts.len();
        let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let Some(extra) = (0..n).find(|i| !subset.contains(i)) else { return Ok(()) };
        let mut bigger = subset.clone();
        bigger.push(extra);
        let a = check_linear_divergence(&m, &pi, &mu, &subset).unwrap();
        let b = check_linear_divergence(&m, &pi, &mu, &bigger).unwrap();
        prop_assert!(a.holds && b.holds);
        let tv = *b.agent_tv.last().unwrap();
        prop_assert!((b.rhs - a.rhs - gamma / (1.0 - gamma) * tv).abs() <= 1e-12 * (1.0 + b.rhs));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn seeded_datasets_are_bit_identical(seed in any::<u64>(), regime in prop::sample::select(vec![Regime::Random, Regime::Medium, Regime::Correlated])) {
        let m = instance(seed, 4, vec![2, 2], 0.9);
        let spec = BehaviorSpec::new(regime, seed);
        let b = make_behavior(&m, &spec).unwrap();
        let x = sample_dataset(&m, &b, &spec, 300, SamplingMode::Trajectory, seed).unwrap();
        let y = sample_dataset(&m, &b, &spec, 300, SamplingMode::Trajectory, seed).unwrap();
        prop_assert_eq!(x.to_bytes().unwrap(), y.to_bytes().unwrap());
    }
}

#[test]
fn factorized_empirical_correlation_vanishes() {
    let m = instance(21, 4, vec![2, 3], 0.9);
    let spec = BehaviorSpec::new(Regime::Medium, 21);
    let b = make_behavior(&m, &spec).unwrap();
    let ds = sample_dataset(&m, &b, &spec, 100_000, SamplingMode::IidOccupancy, 21).unwrap();
    let emp = empirical_conditionals(&ds).unwrap();
    let space = JointActionSpace::new(&[2, 3]);
    for s in 0..4 {
        if emp.state_count(s) < 1000 {
            continue;
        }
        let joint = emp.joint(s).unwrap();
        let rows: Vec<Vec<f64>> = (0..2).map(|i| emp.marginal(s, i).unwrap()).collect();
        let mut product = vec![0.0; space.size()];
        for (a, p) in product.iter_mut().enumerate() {
            *p = (0..2).map(|i| rows[i][space.component(a, i)]).product();
        }
        assert!(tv_distance(&joint, &product).unwrap() < 0.05);
    }
}
