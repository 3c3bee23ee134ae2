//! Factorized and joint policies, total variation, mixed policies and the
//! maximal excess correlation of a joint behavior.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::decmdp::{argmax_first, JointActionSpace};
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
/// Tolerance used when checking that supplied marginals match a joint table.
pub const MARGINAL_TOL: f64 = 1e-9;

/// Per-agent conditional action tables `π_i(a_i|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedPolicy {
    pub n_states: usize,
    pub action_counts: Vec<usize>,
    /// `tables[i]` is flattened `[s][a_i]`.
    pub tables: Vec<Vec<f64>>,
}

impl FactorizedPolicy {
    pub fn from_tables(n_states: usize, action_counts: Vec<usize>, tables: Vec<Vec<f64>>) -> Self {
        Self {
            n_states,
            action_counts,
            tables,
        }
    }

    pub fn uniform(n_states: usize, action_counts: &[usize]) -> Self {
        let tables = action_counts
            .iter()
            .map(|&m| vec![1.0 / m as f64; n_states * m])
            .collect();
        Self::from_tables(n_states, action_counts.to_vec(), tables)
    }

    /// Every agent plays a fixed action in every state.
    pub fn deterministic(n_states: usize, action_counts: &[usize], choice: impl Fn(usize, usize) -> usize) -> Self {
        let tables = action_counts
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let mut t = vec![0.0; n_states * m];
                for s in 0..n_states {
                    t[s * m + choice(i, s)] = 1.0;
                }
                t
            })
            .collect();
        Self::from_tables(n_states, action_counts.to_vec(), tables)
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn joint_space(&self) -> JointActionSpace {
        JointActionSpace::new(&self.action_counts)
    }

    #[inline]
    pub fn row(&self, agent: usize, s: usize) -> &[f64] {
        let m = self.action_counts[agent];
        &self.tables[agent][s * m..(s + 1) * m]
    }

    #[inline]
    pub fn row_mut(&mut self, agent: usize, s: usize) -> &mut [f64] {
        let m = self.action_counts[agent];
        &mut self.tables[agent][s * m..(s + 1) * m]
    }

    #[inline]
    pub fn prob(&self, agent: usize, s: usize, a: usize) -> f64 {
        self.tables[agent][s * self.action_counts[agent] + a]
    }

    pub fn validate(&self) -> Result<()> {
        if self.tables.len() != self.action_counts.len() {
            return Err(Error::Shape(format!(
                "{} tables for {} agents",
                self.tables.len(),
                self.action_counts.len()
            )));
        }
        for (i, (&m, table)) in self.action_counts.iter().zip(&self.tables).enumerate() {
            if table.len() != self.n_states * m {
                return Err(Error::Shape(format!("agent {i} table has length {}", table.len())));
            }
            for s in 0..self.n_states {
                check_row(self.row(i, s), &format!("agent {i} state {s}"))?;
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &FactorizedPolicy) -> bool {
        self.n_states == other.n_states && self.action_counts == other.action_counts
    }

    /// Deterministic policy putting all mass on each agent's most likely
    /// action (ties to the lowest index).
    pub fn greedy(&self) -> FactorizedPolicy {
        Self::deterministic(self.n_states, &self.action_counts, |i, s| argmax_first(self.row(i, s)))
    }

    /// Replaces the table of every agent in `agents` with the one from `other`.
    pub fn with_agents_from(&self, other: &FactorizedPolicy, agents: &[usize]) -> FactorizedPolicy {
        let mut out = self.clone();
        for &i in agents {
            out.tables[i] = other.tables[i].clone();
        }
        out
    }

    /// Joint distribution at `s` (product of the per-agent rows).
    pub fn joint_row(&self, s: usize) -> Vec<f64> {
        let rows: Vec<&[f64]> = (0..self.n_agents()).map(|i| self.row(i, s)).collect();
        product_row(&rows)
    }
}

/// Joint table `π(a|s)` over encoded joint actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    n_states: usize,
    n_joint: usize,
    /// Flattened `[s][a]`.
    probs: Vec<f64>,
}

impl JointPolicy {
    pub fn from_probs(n_states: usize, n_joint: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), n_states * n_joint, "joint policy table size");
        Self {
            n_states,
            n_joint,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_joint: usize) -> Self {
        Self::from_probs(n_states, n_joint, vec![1.0 / n_joint as f64; n_states * n_joint])
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_joint(&self) -> usize {
        self.n_joint
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_joint + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_joint..(s + 1) * self.n_joint]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.n_states * self.n_joint {
            return Err(Error::Shape("joint policy table size".into()));
        }
        for s in 0..self.n_states {
            check_row(self.row(s), &format!("state {s}"))?;
        }
        Ok(())
    }

    /// Exact per-agent marginals.
    pub fn marginals(&self, action_counts: &[usize]) -> Result<FactorizedPolicy> {
        let space = JointActionSpace::new(action_counts);
        if space.size() != self.n_joint {
            return Err(Error::Shape(format!(
                "action counts {action_counts:?} give {} joint actions, policy has {}",
                space.size(),
                self.n_joint
            )));
        }
        let mut tables: Vec<Vec<f64>> = action_counts
            .iter()
            .map(|&m| vec![0.0; self.n_states * m])
            .collect();
        for s in 0..self.n_states {
            for a in 0..self.n_joint {
                let p = self.prob(s, a);
                for (i, table) in tables.iter_mut().enumerate() {
                    table[s * action_counts[i] + space.component(a, i)] += p;
                }
            }
        }
        Ok(FactorizedPolicy::from_tables(self.n_states, action_counts.to_vec(), tables))
    }
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if let Some(p) = row.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{what}: negative probability {p}")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidArgument(format!("{what}: row sums to {total}")));
    }
    Ok(())
}

/// Product of per-agent distributions laid out in the joint encoding.
pub fn product_row(rows: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![1.0];
    // Agent 0 is least significant, so each new agent multiplies the
    // existing block as the next-higher digit.
    for row in rows {
        let mut next = Vec::with_capacity(out.len() * row.len());
        for &p in row.iter() {
            next.extend(out.iter().map(|q| q * p));
        }
        out = next;
    }
    out
}

/// Sample-space size of the joint action implied by a list of marginals.
fn check_same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("lengths {} and {}", p.len(), q.len())));
    }
    Ok(())
}

/// `½‖p - q‖₁`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Per-state total variation between two agents' conditionals and its
/// supremum over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTv {
    pub per_state: Vec<f64>,
    pub sup: f64,
}

pub fn policy_tv(pi: &FactorizedPolicy, mu: &FactorizedPolicy, agent: usize) -> Result<PolicyTv> {
    if !pi.same_shape(mu) {
        return Err(Error::Shape("policies have different shapes".into()));
    }
    if agent >= pi.n_agents() {
        return Err(Error::InvalidArgument(format!("agent {agent} out of range")));
    }
    let per_state = (0..pi.n_states)
        .map(|s| tv_distance(pi.row(agent, s), mu.row(agent, s)))
        .collect::<Result<Vec<_>>>()?;
    let sup = per_state.iter().copied().fold(0.0, f64::max);
    Ok(PolicyTv { per_state, sup })
}

/// Sup-over-states TV for every agent.
pub fn per_agent_sup_tv(pi: &FactorizedPolicy, mu: &FactorizedPolicy) -> Result<Vec<f64>> {
    (0..pi.n_agents())
        .map(|i| policy_tv(pi, mu, i).map(|tv| tv.sup))
        .collect()
}

/// `μ⊗(a|s) = ∏_i μ_i(a_i|s)`.
pub fn product_policy(fp: &FactorizedPolicy) -> JointPolicy {
    let n_joint = fp.joint_space().size();
    let probs = (0..fp.n_states).flat_map(|s| fp.joint_row(s)).collect();
    JointPolicy::from_probs(fp.n_states, n_joint, probs)
}

/// `π^(S)`: agents in `subset` act by `pi`, the rest by `mu`.
pub fn mixed_policy(pi: &FactorizedPolicy, mu: &FactorizedPolicy, subset: &[usize]) -> Result<JointPolicy> {
    if !pi.same_shape(mu) {
        return Err(Error::Shape("policies have different shapes".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= pi.n_agents()) {
        return Err(Error::InvalidArgument(format!(
            "agent {bad} out of range for {} agents",
            pi.n_agents()
        )));
    }
    Ok(product_policy(&mu.with_agents_from(pi, subset)))
}

/// Maximal excess correlation `κ = sup_s TV(μ(·|s), ∏_i μ_i(·|s))`.
///
/// With `strict`, the supplied marginals must match the exact marginals of
/// `mu_joint` within [`MARGINAL_TOL`].
pub fn excess_correlation(
    mu_joint: &JointPolicy,
    marginals: &FactorizedPolicy,
    strict: bool,
) -> Result<f64> {
    let space = marginals.joint_space();
    if space.size() != mu_joint.n_joint() || marginals.n_states != mu_joint.n_states() {
        return Err(Error::Shape("joint policy and marginals disagree in shape".into()));
    }
    if strict {
        let exact = mu_joint.marginals(&marginals.action_counts)?;
        for i in 0..marginals.n_agents() {
            for s in 0..marginals.n_states {
                let dev = exact
                    .row(i, s)
                    .iter()
                    .zip(marginals.row(i, s))
                    .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()));
                if dev > MARGINAL_TOL {
                    return Err(Error::MarginalMismatch {
                        state: s,
                        agent: i,
                        deviation: dev,
                    });
                }
            }
        }
    }
    let mut kappa = 0.0f64;
    for s in 0..mu_joint.n_states() {
        kappa = kappa.max(tv_distance(mu_joint.row(s), &marginals.joint_row(s))?);
    }
    Ok(kappa)
}

/// Softmax-parameterized per-agent policy tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicyParams {
    pub n_states: usize,
    pub action_counts: Vec<usize>,
    /// `logits[i]` is flattened `[s][a_i]`.
    pub logits: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl SoftmaxPolicyParams {
    pub fn zeros(n_states: usize, action_counts: &[usize], temperature: f64) -> Self {
        Self {
            n_states,
            action_counts: action_counts.to_vec(),
            logits: action_counts.iter().map(|&m| vec![0.0; n_states * m]).collect(),
            temperature,
        }
    }

    pub fn logits_row(&self, agent: usize, s: usize) -> &[f64] {
        let m = self.action_counts[agent];
        &self.logits[agent][s * m..(s + 1) * m]
    }

    pub fn logits_row_mut(&mut self, agent: usize, s: usize) -> &mut [f64] {
        let m = self.action_counts[agent];
        &mut self.logits[agent][s * m..(s + 1) * m]
    }

    pub fn row_probs(&self, agent: usize, s: usize) -> Vec<f64> {
        softmax(self.logits_row(agent, s), self.temperature)
    }

    pub fn policy(&self) -> FactorizedPolicy {
        let tables = (0..self.action_counts.len())
            .map(|i| (0..self.n_states).flat_map(|s| self.row_probs(i, s)).collect())
            .collect();
        FactorizedPolicy::from_tables(self.n_states, self.action_counts.clone(), tables)
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// A policy on disk, tied to the mdp it was built against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub mdp_hash: String,
    pub policy: AnyPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnyPolicy {
    Factorized(FactorizedPolicy),
    Joint(JointPolicy),
}

impl PolicyFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_factorized_policy, random_joint_policy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(tv_distance(&[1.0], &[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn policy_tv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = random_factorized_policy(4, &[3, 2], &mut rng);
        assert_eq!(policy_tv(&mu, &mu, 0).unwrap().sup, 0.0);

        let a = FactorizedPolicy::deterministic(3, &[2], |_, _| 0);
        let b = FactorizedPolicy::deterministic(3, &[2], |_, s| usize::from(s == 1));
        let tv = policy_tv(&a, &b, 0).unwrap();
        assert_eq!(tv.per_state, vec![0.0, 1.0, 0.0]);
        assert_eq!(tv.sup, 1.0);

        let pi = random_factorized_policy(4, &[3, 2], &mut rng);
        let tv = policy_tv(&pi, &mu, 0).unwrap();
        for s in 0..4 {
            let mut brute = 0.0;
            for a in 0..3 {
                brute += (pi.prob(0, s, a) - mu.prob(0, s, a)).abs();
            }
            assert!((tv.per_state[s] - brute / 2.0).abs() < 1e-15);
        }
        let shape_mismatch = random_factorized_policy(4, &[2, 2], &mut rng);
        assert!(policy_tv(&pi, &shape_mismatch, 0).is_err());
    }

    #[test]
    fn product_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let single = random_factorized_policy(3, &[4], &mut rng);
        assert_eq!(product_policy(&single).probs(), single.tables[0].as_slice());

        let uniform = FactorizedPolicy::uniform(2, &[2, 2]);
        for &p in product_policy(&uniform).probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }

        let fp = random_factorized_policy(3, &[2, 3, 2], &mut rng);
        let joint = product_policy(&fp);
        joint.validate().unwrap();
        let back = joint.marginals(&fp.action_counts).unwrap();
        for i in 0..3 {
            for (x, y) in back.tables[i].iter().zip(&fp.tables[i]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_policy_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pi = random_factorized_policy(3, &[2, 3], &mut rng);
        let mu = random_factorized_policy(3, &[2, 3], &mut rng);
        assert_eq!(mixed_policy(&pi, &mu, &[]).unwrap(), product_policy(&mu));
        assert_eq!(mixed_policy(&pi, &mu, &[0, 1]).unwrap(), product_policy(&pi));
        assert!(mixed_policy(&pi, &mu, &[2]).is_err());

        let pi = FactorizedPolicy::from_tables(1, vec![2, 2], vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        let mu = FactorizedPolicy::from_tables(1, vec![2, 2], vec![vec![0.5, 0.5], vec![0.3, 0.7]]);
        let mixed = mixed_policy(&pi, &mu, &[0]).unwrap();
        // Joint order: (0,0), (1,0), (0,1), (1,1).
        let expected = [0.3, 0.0, 0.7, 0.0];
        for (x, y) in mixed.row(0).iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn excess_correlation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fp = random_factorized_policy(3, &[2, 3], &mut rng);
        let kappa = excess_correlation(&product_policy(&fp), &fp, true).unwrap();
        assert!(kappa.abs() < 1e-15);

        // Mass 1/2 on (0,0) and (1,1).
        let joint = JointPolicy::from_probs(1, 4, vec![0.5, 0.0, 0.0, 0.5]);
        let marginals = joint.marginals(&[2, 2]).unwrap();
        let kappa = excess_correlation(&joint, &marginals, true).unwrap();
        assert!((kappa - 0.5).abs() < 1e-15);

        for _ in 0..20 {
            let joint = random_joint_policy(2, 6, &mut rng);
            let marginals = random_factorized_policy(2, &[2, 3], &mut rng);
            let kappa = excess_correlation(&joint, &marginals, false).unwrap();
            assert!((0.0..=1.0).contains(&kappa));
            assert!(matches!(
                excess_correlation(&joint, &marginals, true),
                Err(Error::MarginalMismatch { .. })
            ));
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut params = SoftmaxPolicyParams::zeros(2, &[3, 2], 1.0);
        params.logits_row_mut(0, 1).copy_from_slice(&[1000.0, 0.0, -5.0]);
        let pol = params.policy();
        pol.validate().unwrap();
        assert!((pol.prob(0, 1, 0) - 1.0).abs() < 1e-12);
        assert!((pol.prob(1, 0, 0) - 0.5).abs() < 1e-15);
    }
}
