//! Finite Dec-MDPs and exact dynamic-programming quantities.
//!
//! Joint actions use a mixed-radix encoding over the per-agent actions with
//! agent 0 as the least significant digit: for action counts `[m0, m1, m2]`
//! the joint index of `(a0, a1, a2)` is `a0 + m0 * (a1 + m1 * a2)`. Datasets,
//! policies and Q tables all share this layout.
//!
//! Tensors are stored row-major and flattened: the transition table is indexed
//! `[s][a][s']`, the reward table `[s][a]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::policies::JointPolicy;

/// Default convergence tolerance for value iteration.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default iteration cap for value iteration.
pub const DEFAULT_MAX_ITERATIONS: usize = 1_000_000;

const ROW_SUM_TOL: f64 = 1e-12;
const EVAL_RESIDUAL_TOL: f64 = 1e-9;

/// Size cap for the dense exact solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveLimits {
    pub max_states: usize,
    pub max_joint_actions: usize,
}

impl Default for SolveLimits {
    fn default() -> Self {
        Self {
            max_states: 512,
            max_joint_actions: 256,
        }
    }
}

/// Mixed-radix joint-action index space (agent 0 least significant).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointActionSpace {
    action_counts: Vec<usize>,
    strides: Vec<usize>,
    size: usize,
}

impl JointActionSpace {
    pub fn new(action_counts: &[usize]) -> Self {
        let mut strides = Vec::with_capacity(action_counts.len());
        let mut size = 1usize;
        for &m in action_counts {
            strides.push(size);
            size *= m;
        }
        Self {
            action_counts: action_counts.to_vec(),
            strides,
            size,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    /// Number of joint actions.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn encode(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.action_counts.len());
        actions
            .iter()
            .zip(&self.strides)
            .map(|(&a, &stride)| a * stride)
            .sum()
    }

    pub fn decode(&self, joint: usize) -> Vec<usize> {
        self.action_counts
            .iter()
            .zip(&self.strides)
            .map(|(&m, &stride)| (joint / stride) % m)
            .collect()
    }

    /// Action of `agent` inside the joint action.
    pub fn component(&self, joint: usize, agent: usize) -> usize {
        (joint / self.strides[agent]) % self.action_counts[agent]
    }

    /// Joint action with `agent`'s component replaced by `action`.
    pub fn replace(&self, joint: usize, agent: usize, action: usize) -> usize {
        let old = self.component(joint, agent);
        joint - old * self.strides[agent] + action * self.strides[agent]
    }

    /// Encoded index of the other agents' actions (`a_{-i}`), using the same
    /// mixed-radix scheme over the remaining agents in order.
    pub fn others_index(&self, joint: usize, agent: usize) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for j in 0..self.n_agents() {
            if j == agent {
                continue;
            }
            idx += self.component(joint, j) * stride;
            stride *= self.action_counts[j];
        }
        idx
    }

    /// Number of distinct `a_{-i}` configurations.
    pub fn others_size(&self, agent: usize) -> usize {
        self.size / self.action_counts[agent]
    }
}

/// A finite Dec-MDP with full state visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecMdp {
    pub n_states: usize,
    pub n_agents: usize,
    pub action_counts: Vec<usize>,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    /// `P(s'|s,a)` flattened as `[s][a][s']`.
    pub transition: Vec<f64>,
    /// `R(s,a)` flattened as `[s][a]`.
    pub reward: Vec<f64>,
}

/// One failed invariant, naming the field and the offending index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub index: Vec<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{:?}: {}", self.field, self.index, self.message)
    }
}

impl DecMdp {
    /// Builds an MDP and rejects it if any invariant fails.
    pub fn new(
        action_counts: Vec<usize>,
        n_states: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_agents: action_counts.len(),
            action_counts,
            gamma,
            initial_dist,
            transition,
            reward,
        };
        mdp.ensure_valid()?;
        Ok(mdp)
    }

    pub fn n_joint(&self) -> usize {
        self.action_counts.iter().product()
    }

    pub fn joint_space(&self) -> JointActionSpace {
        JointActionSpace::new(&self.action_counts)
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_joint() + a) * self.n_states + s_next]
    }

    /// Next-state distribution `P(·|s,a)`.
    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_joint() + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_joint() + a]
    }

    /// Largest attainable `|Q|` under bounded rewards.
    pub fn value_bound(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }

    /// Checks every invariant and reports the violations; an empty report
    /// means the instance is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field: &str, index: Vec<usize>, message: String| {
            out.push(Violation {
                field: field.to_string(),
                index,
                message,
            })
        };

        if self.n_states == 0 {
            push("n_states", vec![], "must be positive".into());
        }
        if self.action_counts.is_empty() {
            push("action_counts", vec![], "at least one agent required".into());
        }
        if self.n_agents != self.action_counts.len() {
            push(
                "n_agents",
                vec![],
                format!(
                    "{} does not match {} action counts",
                    self.n_agents,
                    self.action_counts.len()
                ),
            );
        }
        for (i, &m) in self.action_counts.iter().enumerate() {
            if m == 0 {
                push("action_counts", vec![i], "must be positive".into());
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            push("gamma", vec![], format!("{} not in (0, 1)", self.gamma));
        }

        let ns = self.n_states;
        let na = self.n_joint();
        if self.initial_dist.len() != ns {
            push(
                "initial_dist",
                vec![],
                format!("length {} != n_states {}", self.initial_dist.len(), ns),
            );
        } else {
            for (s, &p) in self.initial_dist.iter().enumerate() {
                if !(p >= 0.0) {
                    push("initial_dist", vec![s], format!("negative entry {p}"));
                }
            }
            let total: f64 = self.initial_dist.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                push("initial_dist", vec![], format!("sums to {total}"));
            }
        }

        if self.reward.len() != ns * na {
            push(
                "reward",
                vec![],
                format!("length {} != {}", self.reward.len(), ns * na),
            );
        } else {
            for s in 0..ns {
                for a in 0..na {
                    let r = self.r(s, a);
                    if !(r.abs() <= 1.0) {
                        push("reward", vec![s, a], format!("|R| = {} exceeds 1", r.abs()));
                    }
                }
            }
        }

        if self.transition.len() != ns * na * ns {
            push(
                "transition",
                vec![],
                format!("length {} != {}", self.transition.len(), ns * na * ns),
            );
        } else {
            for s in 0..ns {
                for a in 0..na {
                    let row = self.next_dist(s, a);
                    if let Some(bad) = row.iter().position(|&p| !(p >= 0.0)) {
                        push(
                            "transition",
                            vec![s, a, bad],
                            format!("negative probability {}", row[bad]),
                        );
                    }
                    let total: f64 = row.iter().sum();
                    if (total - 1.0).abs() > ROW_SUM_TOL {
                        push("transition", vec![s, a], format!("row-sum {total} != 1"));
                    }
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            return Ok(());
        }
        let msg = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidMdp(msg))
    }

    pub fn check_limits(&self, limits: SolveLimits) -> Result<()> {
        if self.n_states > limits.max_states || self.n_joint() > limits.max_joint_actions {
            return Err(Error::TooLarge {
                states: self.n_states,
                joint_actions: self.n_joint(),
                max_states: limits.max_states,
                max_joint_actions: limits.max_joint_actions,
            });
        }
        Ok(())
    }

    /// Canonical JSON serialization; the content hash is computed over these bytes.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("DecMdp serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_canonical_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mdp: DecMdp = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        mdp.ensure_valid()?;
        Ok(mdp)
    }

    /// State-to-state kernel and expected reward induced by a joint policy.
    pub(crate) fn induced_chain(&self, pi: &JointPolicy) -> (Vec<f64>, Vec<f64>) {
        let ns = self.n_states;
        let na = self.n_joint();
        let mut kernel = vec![0.0; ns * ns];
        let mut reward = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                reward[s] += w * self.r(s, a);
                for (k, &p) in kernel[s * ns..(s + 1) * ns]
                    .iter_mut()
                    .zip(self.next_dist(s, a))
                {
                    *k += w * p;
                }
            }
        }
        (kernel, reward)
    }

    fn check_policy_shape(&self, pi: &JointPolicy) -> Result<()> {
        if pi.n_states() != self.n_states || pi.n_joint() != self.n_joint() {
            return Err(Error::Shape(format!(
                "policy is {}x{}, mdp is {}x{}",
                pi.n_states(),
                pi.n_joint(),
                self.n_states,
                self.n_joint()
            )));
        }
        Ok(())
    }
}

/// Q values over `(state, joint action)`, tagged with the discount they were
/// computed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_joint: usize,
    pub gamma_tag: f64,
    /// Flattened `[s][a]`.
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_joint: usize, gamma: f64) -> Self {
        Self::filled(n_states, n_joint, gamma, 0.0)
    }

    pub fn filled(n_states: usize, n_joint: usize, gamma: f64, value: f64) -> Self {
        Self {
            n_states,
            n_joint,
            gamma_tag: gamma,
            values: vec![value; n_states * n_joint],
        }
    }

    pub fn for_mdp(mdp: &DecMdp) -> Self {
        Self::zeros(mdp.n_states, mdp.n_joint(), mdp.gamma)
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_joint + a]
    }

    #[inline]
    pub fn get_mut(&mut self, s: usize, a: usize) -> &mut f64 {
        &mut self.values[s * self.n_joint + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_joint..(s + 1) * self.n_joint]
    }

    /// Bound `1/(1-γ)` that clipping enforces.
    pub fn bound(&self) -> f64 {
        1.0 / (1.0 - self.gamma_tag)
    }

    /// Clips every entry to `[-1/(1-γ), 1/(1-γ)]`.
    pub fn clip(&mut self) {
        let b = self.bound();
        for v in &mut self.values {
            *v = v.clamp(-b, b);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max Q - min Q` over all entries.
    pub fn range(&self) -> f64 {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        hi - lo
    }

    /// Sup-norm distance.
    pub fn sup_dist(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn same_shape(&self, other: &QTable) -> bool {
        self.n_states == other.n_states && self.n_joint == other.n_joint
    }

    /// `E_{a~π(·|s)} Q(s,a)` for each state.
    pub fn expected_under(&self, pi: &JointPolicy) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                self.row(s)
                    .iter()
                    .zip(pi.row(s))
                    .map(|(q, p)| q * p)
                    .sum()
            })
            .collect()
    }
}

/// One application of the Bellman optimality operator.
pub fn bellman_optimality(mdp: &DecMdp, q: &QTable) -> QTable {
    let ns = mdp.n_states;
    let na = mdp.n_joint();
    let v: Vec<f64> = (0..ns)
        .map(|s| q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut out = QTable::for_mdp(mdp);
    for s in 0..ns {
        for a in 0..na {
            let ev: f64 = mdp.next_dist(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
            *out.get_mut(s, a) = mdp.r(s, a) + mdp.gamma * ev;
        }
    }
    out
}

/// Optimal Q by value iteration with the default iteration cap.
pub fn solve_q_star(mdp: &DecMdp, tol: f64) -> Result<QTable> {
    solve_q_star_capped(mdp, tol, DEFAULT_MAX_ITERATIONS)
}

/// Value iteration until the sup-norm update drops below `tol·(1-γ)/(2γ)`,
/// which puts the returned table within `tol/2` of the fixed point.
pub fn solve_q_star_capped(mdp: &DecMdp, tol: f64, max_iterations: usize) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    mdp.ensure_valid()?;
    let threshold = tol * (1.0 - mdp.gamma) / (2.0 * mdp.gamma);
    let mut q = QTable::for_mdp(mdp);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        let next = bellman_optimality(mdp, &q);
        residual = next.sup_dist(&q);
        q = next;
        if residual < threshold {
            return Ok(q);
        }
    }
    Err(Error::NotConverged {
        iterations: max_iterations,
        residual,
    })
}

fn solve_dense(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    matrix
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("singular system".into()))
}

/// State values `V^π` from the direct solve of `(I - γ P^π) V = r^π`.
pub fn evaluate_policy_v(mdp: &DecMdp, pi: &JointPolicy) -> Result<Vec<f64>> {
    mdp.check_policy_shape(pi)?;
    mdp.check_limits(SolveLimits::default())?;
    let ns = mdp.n_states;
    let (kernel, reward) = mdp.induced_chain(pi);
    let matrix = DMatrix::from_fn(ns, ns, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - mdp.gamma * kernel[i * ns + j]
    });
    let v = solve_dense(matrix, DVector::from_vec(reward))?;
    Ok(v.iter().copied().collect())
}

/// Exact `Q^π`, solved directly (no iteration). The Bellman evaluation
/// residual is checked against `1e-9`.
pub fn evaluate_policy_q(mdp: &DecMdp, pi: &JointPolicy) -> Result<QTable> {
    let v = evaluate_policy_v(mdp, pi)?;
    let q = q_from_v(mdp, &v);
    let residual = evaluation_residual(mdp, pi, &q);
    if !(residual < EVAL_RESIDUAL_TOL) {
        return Err(Error::Solver(format!(
            "policy evaluation residual {residual:e} exceeds {EVAL_RESIDUAL_TOL:e}"
        )));
    }
    Ok(q)
}

fn q_from_v(mdp: &DecMdp, v: &[f64]) -> QTable {
    let mut q = QTable::for_mdp(mdp);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_joint() {
            let ev: f64 = mdp.next_dist(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
            *q.get_mut(s, a) = mdp.r(s, a) + mdp.gamma * ev;
        }
    }
    q
}

/// `‖Q - (R + γ P Π Q)‖∞`.
pub fn evaluation_residual(mdp: &DecMdp, pi: &JointPolicy, q: &QTable) -> f64 {
    let v = q.expected_under(pi);
    q_from_v(mdp, &v).sup_dist(q)
}

/// `V^π = Σ_s d0(s) Σ_a π(a|s) Q^π(s,a)`.
pub fn policy_value(mdp: &DecMdp, pi: &JointPolicy) -> Result<f64> {
    let v = evaluate_policy_v(mdp, pi)?;
    Ok(mdp.initial_dist.iter().zip(&v).map(|(d, v)| d * v).sum())
}

/// Deterministic joint policy greedy w.r.t. `q`; ties go to the lowest index.
pub fn greedy_joint(q: &QTable) -> JointPolicy {
    let mut probs = vec![0.0; q.n_states * q.n_joint];
    for s in 0..q.n_states {
        let best = argmax_first(q.row(s));
        probs[s * q.n_joint + best] = 1.0;
    }
    JointPolicy::from_probs(q.n_states, q.n_joint, probs)
}

pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
