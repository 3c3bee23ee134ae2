//! Random instance generation: Dirichlet(1) rows for transitions and
//! policies, uniform rewards in `[-1, 1]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::decmdp::DecMdp;
use crate::policies::{FactorizedPolicy, JointPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub n_states: usize,
    pub action_counts: Vec<usize>,
    pub gamma: f64,
}

impl InstanceShape {
    pub fn new(n_states: usize, action_counts: Vec<usize>, gamma: f64) -> Self {
        Self {
            n_states,
            action_counts,
            gamma,
        }
    }

    /// Uniformly drawn shape with at most the given sizes.
    pub fn sample<R: Rng>(
        max_states: usize,
        max_agents: usize,
        max_actions: usize,
        gammas: &[f64],
        rng: &mut R,
    ) -> Self {
        let n_states = rng.random_range(1..=max_states);
        let n_agents = rng.random_range(1..=max_agents);
        let action_counts = (0..n_agents)
            .map(|_| rng.random_range(1..=max_actions))
            .collect();
        let gamma = gammas[rng.random_range(0..gammas.len())];
        Self::new(n_states, action_counts, gamma)
    }
}

/// A Dirichlet(1, ..., 1) draw.
pub fn dirichlet_uniform<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    let mut xs: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = xs.iter().sum();
    if total > 0.0 {
        xs.iter_mut().for_each(|x| *x /= total);
    } else {
        xs.iter_mut().for_each(|x| *x = 1.0 / len as f64);
    }
    xs
}

pub fn random_mdp<R: Rng>(shape: &InstanceShape, rng: &mut R) -> DecMdp {
    let ns = shape.n_states;
    let na: usize = shape.action_counts.iter().product();
    let transition = (0..ns * na)
        .flat_map(|_| dirichlet_uniform(ns, rng))
        .collect();
    let reward = (0..ns * na).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let initial_dist = dirichlet_uniform(ns, rng);
    DecMdp {
        n_states: ns,
        n_agents: shape.action_counts.len(),
        action_counts: shape.action_counts.clone(),
        gamma: shape.gamma,
        initial_dist,
        transition,
        reward,
    }
}

pub fn random_factorized_policy<R: Rng>(
    n_states: usize,
    action_counts: &[usize],
    rng: &mut R,
) -> FactorizedPolicy {
    let tables = action_counts
        .iter()
        .map(|&m| (0..n_states).flat_map(|_| dirichlet_uniform(m, rng)).collect())
        .collect();
    FactorizedPolicy::from_tables(n_states, action_counts.to_vec(), tables)
}

pub fn random_joint_policy<R: Rng>(n_states: usize, n_joint: usize, rng: &mut R) -> JointPolicy {
    let probs = (0..n_states)
        .flat_map(|_| dirichlet_uniform(n_joint, rng))
        .collect();
    JointPolicy::from_probs(n_states, n_joint, probs)
}

/// Independent, reproducible RNG stream keyed by a seed and a path of labels.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Draws an index from a discrete distribution by inverse CDF.
pub fn sample_index<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_instances_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let shape = InstanceShape::sample(6, 3, 3, &[0.5, 0.9, 0.95], &mut rng);
            let mdp = random_mdp(&shape, &mut rng);
            assert!(mdp.validate().is_empty(), "{:?}", mdp.validate());
        }
    }

    #[test]
    fn streams_differ_by_path() {
        let a: u64 = stream_rng(1, &[2, 3]).random();
        let b: u64 = stream_rng(1, &[3, 2]).random();
        let c: u64 = stream_rng(1, &[2, 3]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn sample_index_skips_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            assert_eq!(sample_index(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }
}
