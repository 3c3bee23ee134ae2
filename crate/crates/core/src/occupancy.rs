//! Exact discounted occupancy measures and the divergence bounds between
//! mixed policies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decmdp::{DecMdp, SolveLimits};
use crate::error::{Error, Result};
use crate::policies::{
    excess_correlation, mixed_policy, per_agent_sup_tv, policy_tv, product_policy, product_row,
    tv_distance, FactorizedPolicy, JointPolicy,
};

/// Slack below which a bound counts as violated.
pub const HOLDS_TOL: f64 = 1e-9;
const RESIDUAL_TOL: f64 = 1e-9;
const NEGATIVE_SLACK: f64 = 1e-12;

/// Normalized discounted state-visitation distribution of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub dist: Vec<f64>,
    pub policy_tag: String,
    pub mdp_hash: String,
}

impl OccupancyMeasure {
    /// Wasserstein-1 under the 0-1 metric, i.e. total variation.
    pub fn w1(&self, other: &OccupancyMeasure) -> Result<f64> {
        if self.mdp_hash != other.mdp_hash {
            return Err(Error::HashMismatch {
                expected: self.mdp_hash.clone(),
                found: other.mdp_hash.clone(),
            });
        }
        tv_distance(&self.dist, &other.dist)
    }
}

/// Solves `(I - γ (P^φ)ᵀ) d = (1-γ) d0` directly.
pub fn occupancy(mdp: &DecMdp, phi: &JointPolicy) -> Result<OccupancyMeasure> {
    occupancy_tagged(mdp, phi, "")
}

pub fn occupancy_tagged(mdp: &DecMdp, phi: &JointPolicy, tag: &str) -> Result<OccupancyMeasure> {
    let dist = occupancy_dist(mdp, phi)?;
    Ok(OccupancyMeasure {
        dist,
        policy_tag: tag.to_string(),
        mdp_hash: mdp.content_hash(),
    })
}

pub(crate) fn occupancy_dist(mdp: &DecMdp, phi: &JointPolicy) -> Result<Vec<f64>> {
    if phi.n_states() != mdp.n_states || phi.n_joint() != mdp.n_joint() {
        return Err(Error::Shape("policy does not match mdp".into()));
    }
    mdp.check_limits(SolveLimits::default())?;
    let ns = mdp.n_states;
    let g = mdp.gamma;
    let (kernel, _) = mdp.induced_chain(phi);
    let matrix = DMatrix::from_fn(ns, ns, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - g * kernel[j * ns + i]
    });
    let rhs = DVector::from_iterator(ns, mdp.initial_dist.iter().map(|p| (1.0 - g) * p));
    let sol = matrix
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("singular occupancy system".into()))?;
    let mut dist: Vec<f64> = sol.iter().copied().collect();

    let mut residual = 0.0f64;
    for t in 0..ns {
        let flow: f64 = (0..ns).map(|s| dist[s] * kernel[s * ns + t]).sum();
        residual = residual.max((dist[t] - (1.0 - g) * mdp.initial_dist[t] - g * flow).abs());
    }
    if !(residual < RESIDUAL_TOL) {
        return Err(Error::Solver(format!("occupancy residual {residual:e}")));
    }
    for (s, d) in dist.iter_mut().enumerate() {
        if *d < -NEGATIVE_SLACK {
            return Err(Error::Solver(format!("negative occupancy {d:e} at state {s}")));
        }
        *d = d.max(0.0);
    }
    Ok(dist)
}

/// State-action occupancy `d(s)·φ(a|s)`, flattened `[s][a]`.
pub fn state_action_occupancy(mdp: &DecMdp, phi: &JointPolicy) -> Result<Vec<f64>> {
    let d = occupancy_dist(mdp, phi)?;
    Ok((0..mdp.n_states)
        .flat_map(|s| {
            let ds = d[s];
            phi.row(s).iter().map(move |p| p * ds)
        })
        .collect())
}

/// `½‖d^a - d^b‖₁` over states.
pub fn occupancy_w1(mdp: &DecMdp, phi_a: &JointPolicy, phi_b: &JointPolicy) -> Result<f64> {
    let da = occupancy_dist(mdp, phi_a)?;
    let db = occupancy_dist(mdp, phi_b)?;
    tv_distance(&da, &db)
}

/// One evaluated divergence bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCheck {
    pub subset: Vec<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    pub kappa: f64,
    /// Sup-over-states TV for each agent in `subset`.
    pub agent_tv: Vec<f64>,
    /// The same bound with the supremum taken after summing per-state TVs;
    /// never larger than `rhs`.
    pub rhs_state_wise: f64,
}

impl DivergenceCheck {
    fn new(subset: &[usize], lhs: f64, rhs: f64, kappa: f64, agent_tv: Vec<f64>, rhs_state_wise: f64) -> Self {
        let slack = rhs - lhs;
        Self {
            subset: subset.to_vec(),
            lhs,
            rhs,
            slack,
            holds: slack >= -HOLDS_TOL,
            kappa,
            agent_tv,
            rhs_state_wise,
        }
    }
}

fn subset_tvs(pi: &FactorizedPolicy, mu: &FactorizedPolicy, subset: &[usize]) -> Result<(Vec<f64>, f64)> {
    let mut sups = Vec::with_capacity(subset.len());
    let mut state_sum = vec![0.0; pi.n_states];
    for &i in subset {
        let tv = policy_tv(pi, mu, i)?;
        sups.push(tv.sup);
        for (acc, v) in state_sum.iter_mut().zip(&tv.per_state) {
            *acc += v;
        }
    }
    let state_sup = state_sum.into_iter().fold(0.0, f64::max);
    Ok((sups, state_sup))
}

/// `W1(d^(S), d^(∅)) ≤ (γ/(1-γ)) Σ_{i∈S} TV(π_i, μ_i)` for a factorized behavior.
pub fn check_linear_divergence(
    mdp: &DecMdp,
    pi: &FactorizedPolicy,
    mu: &FactorizedPolicy,
    subset: &[usize],
) -> Result<DivergenceCheck> {
    let coef = mdp.gamma / (1.0 - mdp.gamma);
    let mixed = mixed_policy(pi, mu, subset)?;
    let lhs = occupancy_w1(mdp, &mixed, &product_policy(mu))?;
    let (agent_tv, state_sup) = subset_tvs(pi, mu, subset)?;
    let rhs = coef * agent_tv.iter().sum::<f64>();
    Ok(DivergenceCheck::new(subset, lhs, rhs, 0.0, agent_tv, coef * state_sup))
}

/// `W1(d^(S), d^μ) ≤ (γ/(1-γ)) (Σ_{i∈S} TV(π_i, μ_i) + κ)` for a possibly
/// correlated joint behavior, with `μ_i` its exact marginals.
pub fn check_correlated_divergence(
    mdp: &DecMdp,
    pi: &FactorizedPolicy,
    mu_joint: &JointPolicy,
    subset: &[usize],
) -> Result<DivergenceCheck> {
    let coef = mdp.gamma / (1.0 - mdp.gamma);
    let marginals = mu_joint.marginals(&pi.action_counts)?;
    let kappa = excess_correlation(mu_joint, &marginals, true)?;
    let mixed = mixed_policy(pi, &marginals, subset)?;
    let lhs = occupancy_w1(mdp, &mixed, mu_joint)?;
    let (agent_tv, state_sup) = subset_tvs(pi, &marginals, subset)?;
    let rhs = coef * (agent_tv.iter().sum::<f64>() + kappa);
    Ok(DivergenceCheck::new(
        subset,
        lhs,
        rhs,
        kappa,
        agent_tv,
        coef * (state_sup + kappa),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductDifference {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `Σ_a |∏ p_i(a_i) - ∏ q_i(a_i)| ≤ 2 Σ_i TV(p_i, q_i)`.
pub fn check_product_difference(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<ProductDifference> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("arity {} vs {}", p.len(), q.len())));
    }
    let mut rhs = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        rhs += 2.0 * tv_distance(pi, qi)?;
    }
    let prows: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
    let qrows: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();
    let lhs: f64 = product_row(&prows)
        .iter()
        .zip(product_row(&qrows))
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(ProductDifference {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
    })
}

/// Bound checks for every subset of agents.
pub fn all_subsets(n_agents: usize) -> Vec<Vec<usize>> {
    (0..1usize << n_agents)
        .map(|mask| (0..n_agents).filter(|i| mask >> i & 1 == 1).collect())
        .collect()
}

/// Sum of sup-TVs over all agents.
pub fn total_tv(pi: &FactorizedPolicy, mu: &FactorizedPolicy) -> Result<f64> {
    Ok(per_agent_sup_tv(pi, mu)?.iter().sum())
}
