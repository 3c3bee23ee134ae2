//! Backup operators built from partial action replacement.
//!
//! Exact operators take expectations under the model: the next-state action
//! of agents outside the replaced subset is drawn from the behavior
//! marginals `μ_j`. Sampled operators work on logged records instead, keeping
//! the logged companion actions `a'_{-S}` and drawing only the replaced
//! agents from `π`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Transition;
use crate::decmdp::{DecMdp, JointActionSpace, QTable};
use crate::error::{Error, Result};
use crate::policies::{mixed_policy, FactorizedPolicy};
use crate::random::sample_index;

/// Lexicographic list of all size-`k` subsets of `0..n`.
pub fn subsets_of_size(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

fn check_shapes(mdp: &DecMdp, q: &QTable, pi: &FactorizedPolicy, mu: &FactorizedPolicy) -> Result<()> {
    if q.n_states != mdp.n_states || q.n_joint != mdp.n_joint() {
        return Err(Error::Shape("Q table does not match mdp".into()));
    }
    if !pi.same_shape(mu) || pi.n_states != mdp.n_states || pi.action_counts != mdp.action_counts {
        return Err(Error::Shape("policies do not match mdp".into()));
    }
    Ok(())
}

/// `R + γ P V` for a next-state value vector `V`.
fn backup_with_values(mdp: &DecMdp, next_values: &[f64]) -> QTable {
    let mut out = QTable::for_mdp(mdp);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_joint() {
            let ev: f64 = mdp
                .next_dist(s, a)
                .iter()
                .zip(next_values)
                .map(|(p, v)| p * v)
                .sum();
            *out.get_mut(s, a) = mdp.r(s, a) + mdp.gamma * ev;
        }
    }
    out
}

/// Weighted mixture of mixed-policy bootstrap values:
/// `V(s') = Σ_S w_S Σ_{a'} π^(S)(a'|s') Q(s',a')`.
fn mixture_values(q: &QTable, pi: &FactorizedPolicy, mu: &FactorizedPolicy, weighted: &[(Vec<usize>, f64)]) -> Result<Vec<f64>> {
    let mut values = vec![0.0; q.n_states];
    for (subset, w) in weighted {
        if *w == 0.0 {
            continue;
        }
        let mixed = mixed_policy(pi, mu, subset)?;
        for (v, e) in values.iter_mut().zip(q.expected_under(&mixed)) {
            *v += w * e;
        }
    }
    Ok(values)
}

/// `T_i^ind`: only agent `i` bootstraps from `π_i`, the others from `μ_{-i}`.
pub fn individual_backup_exact(
    mdp: &DecMdp,
    q: &QTable,
    pi: &FactorizedPolicy,
    mu: &FactorizedPolicy,
    agent: usize,
) -> Result<QTable> {
    check_shapes(mdp, q, pi, mu)?;
    if agent >= mdp.n_agents {
        return Err(Error::InvalidArgument(format!("agent {agent} out of range")));
    }
    let v = mixture_values(q, pi, mu, &[(vec![agent], 1.0)])?;
    Ok(backup_with_values(mdp, &v))
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    Ok(())
}

fn k_subsets_weighted(n: usize, k: usize, weight: f64) -> Vec<(Vec<usize>, f64)> {
    let subsets = subsets_of_size(n, k);
    let each = weight / subsets.len() as f64;
    subsets.into_iter().map(|s| (s, each)).collect()
}

/// `T^(k)`: exactly `k` uniformly chosen agents deviate to `π`.
pub fn k_backup_exact(
    mdp: &DecMdp,
    q: &QTable,
    pi: &FactorizedPolicy,
    mu: &FactorizedPolicy,
    k: usize,
) -> Result<QTable> {
    check_shapes(mdp, q, pi, mu)?;
    check_k(k, mdp.n_agents)?;
    let v = mixture_values(q, pi, mu, &k_subsets_weighted(mdp.n_agents, k, 1.0))?;
    Ok(backup_with_values(mdp, &v))
}

pub fn validate_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::InvalidArgument(format!("{} weights for {n} agents", w.len())));
    }
    if w.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative weight in {w:?}")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("weights sum to {total}")));
    }
    Ok(())
}

/// `T^SP = Σ_k w_k T^(k)` with `w[k-1]` the weight of `k` deviations.
pub fn soft_partial_exact(
    mdp: &DecMdp,
    q: &QTable,
    pi: &FactorizedPolicy,
    mu: &FactorizedPolicy,
    w: &[f64],
) -> Result<QTable> {
    check_shapes(mdp, q, pi, mu)?;
    validate_weights(w, mdp.n_agents)?;
    let weighted: Vec<(Vec<usize>, f64)> = w
        .iter()
        .enumerate()
        .flat_map(|(idx, &wk)| k_subsets_weighted(mdp.n_agents, idx + 1, wk))
        .collect();
    let v = mixture_values(q, pi, mu, &weighted)?;
    Ok(backup_with_values(mdp, &v))
}

/// `T^ai = (1/n) Σ_i T_i^ind`.
pub fn averaged_individual_exact(
    mdp: &DecMdp,
    q: &QTable,
    pi: &FactorizedPolicy,
    mu: &FactorizedPolicy,
) -> Result<QTable> {
    check_shapes(mdp, q, pi, mu)?;
    let n = mdp.n_agents;
    let weighted: Vec<(Vec<usize>, f64)> = (0..n).map(|i| (vec![i], 1.0 / n as f64)).collect();
    let v = mixture_values(q, pi, mu, &weighted)?;
    Ok(backup_with_values(mdp, &v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `‖op Q1 - op Q2‖∞ ≤ γ ‖Q1 - Q2‖∞`, within `1e-10`.
pub fn contraction_check<F>(op: F, q1: &QTable, q2: &QTable, gamma: f64) -> Result<ContractionCheck>
where
    F: Fn(&QTable) -> Result<QTable>,
{
    let lhs = op(q1)?.sup_dist(&op(q2)?);
    let rhs = gamma * q1.sup_dist(q2);
    Ok(ContractionCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-10,
    })
}

/// Anything a bootstrap value can be read from.
pub trait BootstrapValue {
    fn value(&self, s: usize, a: usize) -> f64;
}

impl BootstrapValue for QTable {
    fn value(&self, s: usize, a: usize) -> f64 {
        self.get(s, a)
    }
}

/// Pessimistic ensemble value `min_j Q_j(s,a)`.
pub struct EnsembleMin<'a>(pub &'a [QTable]);

impl BootstrapValue for EnsembleMin<'_> {
    fn value(&self, s: usize, a: usize) -> f64 {
        self.0.iter().map(|q| q.get(s, a)).fold(f64::INFINITY, f64::min)
    }
}

/// First `k` entries of a Fisher–Yates shuffle of `0..n`, sorted.
pub fn sample_subset<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
    let mut subset = perm[..k].to_vec();
    subset.sort_unstable();
    subset
}

/// Replaces the listed agents' components of `next_action` with draws from
/// `π_i(·|s')`, in agent order.
pub fn replace_agents<R: Rng>(
    space: &JointActionSpace,
    next_state: usize,
    next_action: usize,
    pi: &FactorizedPolicy,
    agents: &[usize],
    rng: &mut R,
) -> usize {
    agents.iter().fold(next_action, |joint, &i| {
        let b = sample_index(pi.row(i, next_state), rng);
        space.replace(joint, i, b)
    })
}

/// Sampled targets for a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackupTarget {
    pub k: usize,
    pub values: Vec<f64>,
    pub subsets: Vec<Vec<usize>>,
    pub next_actions: Vec<usize>,
}

/// For each record: draw `k` agents, replace their logged next actions with
/// draws from `π`, and bootstrap `r + γ Q(s', a'^(k))`.
pub fn sampled_backup<B: BootstrapValue, R: Rng>(
    batch: &[Transition],
    q: &B,
    pi: &FactorizedPolicy,
    gamma: f64,
    k: usize,
    rng: &mut R,
) -> Result<BackupTarget> {
    let space = pi.joint_space();
    check_k(k, space.n_agents())?;
    let mut out = BackupTarget {
        k,
        values: Vec::with_capacity(batch.len()),
        subsets: Vec::with_capacity(batch.len()),
        next_actions: Vec::with_capacity(batch.len()),
    };
    for (index, rec) in batch.iter().enumerate() {
        let logged = rec.next_action.ok_or(Error::MissingNextAction { index })?;
        let subset = sample_subset(space.n_agents(), k, rng);
        let a_k = replace_agents(&space, rec.next_state, logged, pi, &subset, rng);
        out.values.push(rec.reward + gamma * q.value(rec.next_state, a_k));
        out.subsets.push(subset);
        out.next_actions.push(a_k);
    }
    Ok(out)
}

/// Exact `E[Q(s', a'^(k)) | s', logged a']`: uniform over size-`k` subsets,
/// `π` for the replaced agents, logged actions for the rest.
pub fn partial_replacement_expectation<B: BootstrapValue>(
    q: &B,
    pi: &FactorizedPolicy,
    next_state: usize,
    logged: usize,
    k: usize,
) -> Result<f64> {
    let space = pi.joint_space();
    check_k(k, space.n_agents())?;
    let subsets = subsets_of_size(space.n_agents(), k);
    let mut total = 0.0;
    for subset in &subsets {
        // Enumerate every replacement tuple for the subset.
        let sizes: Vec<usize> = subset.iter().map(|&i| pi.action_counts[i]).collect();
        let combos: usize = sizes.iter().product();
        for c in 0..combos {
            let mut rem = c;
            let mut joint = logged;
            let mut prob = 1.0;
            for (&i, &m) in subset.iter().zip(&sizes) {
                let b = rem % m;
                rem /= m;
                prob *= pi.prob(i, next_state, b);
                joint = space.replace(joint, i, b);
            }
            total += prob * q.value(next_state, joint);
        }
    }
    Ok(total / subsets.len() as f64)
}
