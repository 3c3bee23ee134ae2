//! Value-error bounds, gradient equivalence of the averaged-individual loss,
//! and the range condition that makes `Q` Lipschitz under the 0-1 metric.

use serde::{Deserialize, Serialize};

use crate::datagen::Transition;
use crate::decmdp::{evaluate_policy_q, solve_q_star, DecMdp, QTable, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::learners::{k_eff, WeightTrace};
use crate::occupancy::{occupancy_dist, HOLDS_TOL};
use crate::operators::{averaged_individual_exact, individual_backup_exact};
use crate::policies::{
    excess_correlation, mixed_policy, per_agent_sup_tv, product_policy, FactorizedPolicy, JointPolicy,
};

/// Shift coefficient `4γ/(1-γ)²`.
pub fn shift_coefficient(gamma: f64) -> f64 {
    4.0 * gamma / ((1.0 - gamma) * (1.0 - gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Theorem {
    T2,
    T3,
    T4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: Theorem,
    pub eps_subopt: f64,
    pub eps_fqi: f64,
    pub shift: f64,
    /// Contribution of `κ` to the shift (zero outside T3).
    pub kappa_term: f64,
    /// Expected effective number of deviating agents (T4 only).
    pub k_eff: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

impl BoundReport {
    fn new(theorem: Theorem, base: &BaseTerms, shift: f64, kappa_term: f64, k_eff: Option<f64>) -> Self {
        let rhs = base.eps_subopt + base.eps_fqi + shift;
        Self {
            theorem,
            eps_subopt: base.eps_subopt,
            eps_fqi: base.eps_fqi,
            shift,
            kappa_term,
            k_eff,
            lhs: base.lhs,
            rhs,
            slack: rhs - base.lhs,
            holds: base.lhs <= rhs + HOLDS_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeCheck {
    pub range: f64,
    pub limit: f64,
    pub holds: bool,
}

/// `max Q - min Q ≤ 2/(1-γ)`.
pub fn lipschitz_range_check(q: &QTable, gamma: f64) -> RangeCheck {
    let range = q.range();
    let limit = 2.0 / (1.0 - gamma);
    RangeCheck {
        range,
        limit,
        holds: range <= limit + 1e-12,
    }
}

fn require_range(q: &QTable, gamma: f64) -> Result<()> {
    let c = lipschitz_range_check(q, gamma);
    if c.holds {
        Ok(())
    } else {
        Err(Error::RangeViolation {
            range: c.range,
            limit: c.limit,
            gap: c.range - c.limit,
        })
    }
}

struct BaseTerms {
    eps_subopt: f64,
    eps_fqi: f64,
    lhs: f64,
    d_pi: Vec<f64>,
}

/// `E_{s~d^π, a~π} Q(s,a)`.
fn occupancy_expectation(d: &[f64], joint: &JointPolicy, q: &QTable) -> f64 {
    d.iter().zip(q.expected_under(joint)).map(|(d, v)| d * v).sum()
}

fn base_terms(mdp: &DecMdp, pi: &FactorizedPolicy, qhat: &QTable) -> Result<BaseTerms> {
    if qhat.n_states != mdp.n_states || qhat.n_joint != mdp.n_joint() {
        return Err(Error::Shape("Qhat does not match mdp".into()));
    }
    require_range(qhat, mdp.gamma)?;
    let joint = product_policy(pi);
    let q_pi = evaluate_policy_q(mdp, &joint)?;
    let q_star = solve_q_star(mdp, DEFAULT_TOL)?;
    let d_pi = occupancy_dist(mdp, &joint)?;
    let v_pi = occupancy_expectation(&d_pi, &joint, &q_pi);
    let v_hat = occupancy_expectation(&d_pi, &joint, qhat);
    Ok(BaseTerms {
        eps_subopt: q_pi.sup_dist(&q_star),
        eps_fqi: q_star.sup_dist(qhat),
        lhs: (v_pi - v_hat).abs(),
        d_pi,
    })
}

/// `|V^π - V̂^π| ≤ ε_Subopt + ε_FQI + (4γ/(1-γ)²) Σ_i TV(π_i, μ_i)`.
pub fn value_error_bound(mdp: &DecMdp, pi: &FactorizedPolicy, mu: &FactorizedPolicy, qhat: &QTable) -> Result<BoundReport> {
    let base = base_terms(mdp, pi, qhat)?;
    let tv: f64 = per_agent_sup_tv(pi, mu)?.iter().sum();
    Ok(BoundReport::new(Theorem::T2, &base, shift_coefficient(mdp.gamma) * tv, 0.0, None))
}

/// As [`value_error_bound`] with `κ` of the joint behavior added to the TV sum.
pub fn value_error_bound_corr(
    mdp: &DecMdp,
    pi: &FactorizedPolicy,
    mu_joint: &JointPolicy,
    qhat: &QTable,
) -> Result<BoundReport> {
    let base = base_terms(mdp, pi, qhat)?;
    let marginals = mu_joint.marginals(&pi.action_counts)?;
    let kappa = excess_correlation(mu_joint, &marginals, true)?;
    let tv: f64 = per_agent_sup_tv(pi, &marginals)?.iter().sum();
    let coef = shift_coefficient(mdp.gamma);
    Ok(BoundReport::new(Theorem::T3, &base, coef * (tv + kappa), coef * kappa, None))
}

/// Soft-partial bound with per-state and global-average effective deviation counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacqlBound {
    pub per_state: BoundReport,
    pub global: BoundReport,
    /// Average single-agent deviation `TV̄`.
    pub mean_tv: f64,
}

/// Shift `(4γ/(1-γ)²) E_{s~d^π}[k_eff(s)] TV̄(π, μ)`.
pub fn spacql_bound(
    mdp: &DecMdp,
    pi: &FactorizedPolicy,
    mu: &FactorizedPolicy,
    qhat: &QTable,
    trace: &WeightTrace,
) -> Result<SpacqlBound> {
    let n = pi.n_agents();
    if trace.n_agents != n || trace.per_state.len() != mdp.n_states {
        return Err(Error::Shape("weight trace does not match mdp".into()));
    }
    for s in 0..mdp.n_states {
        let w = trace.resolved(s);
        let total: f64 = w.iter().sum();
        if w.len() != n || (total - 1.0).abs() > 1e-9 || w.iter().any(|x| *x < 0.0) {
            return Err(Error::InvalidArgument(format!("weights at state {s} sum to {total}")));
        }
    }
    let base = base_terms(mdp, pi, qhat)?;
    let tv_sum = per_agent_sup_tv(pi, mu)?.iter().sum::<f64>();
    let mean_tv = tv_sum / n as f64;
    let coef = shift_coefficient(mdp.gamma);
    // k_eff·TV̄ is computed as (k_eff/n)·ΣTV so that k_eff = n reproduces the T2 shift exactly.
    let mass: f64 = base.d_pi.iter().sum();
    let frac_state: f64 = base
        .d_pi
        .iter()
        .enumerate()
        .map(|(s, d)| d * (k_eff(trace.resolved(s)) / n as f64))
        .sum::<f64>()
        / mass;
    let frac_global = k_eff(&trace.global) / n as f64;
    let (k_state, k_global) = (frac_state * n as f64, frac_global * n as f64);
    Ok(SpacqlBound {
        per_state: BoundReport::new(Theorem::T4, &base, coef * tv_sum * frac_state, 0.0, Some(k_state)),
        global: BoundReport::new(Theorem::T4, &base, coef * tv_sum * frac_global, 0.0, Some(k_global)),
        mean_tv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Targets held fixed.
    Semi,
    /// Gradients also flow through the targets.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub mode: GradientMode,
    pub deviation: f64,
    pub holds: bool,
}

/// Adds `-γ δ Σ_{s'} P(s'|s,a) Σ_{a'} φ(a'|s') e_{s'a'}` into `grad`.
fn add_target_gradient(mdp: &DecMdp, rows: &[Vec<f64>], s: usize, a: usize, scale: f64, grad: &mut [f64]) {
    let na = mdp.n_joint();
    for (s2, p) in mdp.next_dist(s, a).iter().enumerate() {
        if *p == 0.0 {
            continue;
        }
        for (a2, phi) in rows[s2].iter().enumerate() {
            grad[s2 * na + a2] -= scale * mdp.gamma * p * phi;
        }
    }
}

/// Compares the mean of per-agent loss gradients with the gradient of the
/// centralized loss toward `T^ai Q`, over the `(s, a)` pairs of `batch`.
pub fn gradient_equivalence_check(
    mdp: &DecMdp,
    batch: &[Transition],
    q: &QTable,
    pi: &FactorizedPolicy,
    mu: &FactorizedPolicy,
    mode: GradientMode,
) -> Result<GradientCheck> {
    let n = mdp.n_agents;
    let na = mdp.n_joint();
    let individual: Vec<QTable> = (0..n)
        .map(|i| individual_backup_exact(mdp, q, pi, mu, i))
        .collect::<Result<_>>()?;
    let averaged = averaged_individual_exact(mdp, q, pi, mu)?;

    // Row-wise next-state policies, only needed for the full gradient.
    let rows_for = |subset: &[usize]| -> Result<Vec<Vec<f64>>> {
        let joint = mixed_policy(pi, mu, subset)?;
        Ok((0..mdp.n_states).map(|s| joint.row(s).to_vec()).collect())
    };
    let (ind_rows, avg_rows) = if mode == GradientMode::Full {
        let ind: Vec<Vec<Vec<f64>>> = (0..n).map(|i| rows_for(&[i])).collect::<Result<_>>()?;
        let avg = (0..mdp.n_states)
            .map(|s| (0..na).map(|a| ind.iter().map(|r| r[s][a]).sum::<f64>() / n as f64).collect())
            .collect();
        (ind, avg)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut g_a = vec![0.0; q.values.len()];
    let mut g_b = vec![0.0; q.values.len()];
    for rec in batch {
        let (s, a) = (rec.state, rec.action);
        let idx = s * na + a;
        for (i, t) in individual.iter().enumerate() {
            let delta = q.get(s, a) - t.get(s, a);
            g_a[idx] += delta / n as f64;
            if mode == GradientMode::Full {
                add_target_gradient(mdp, &ind_rows[i], s, a, delta / n as f64, &mut g_a);
            }
        }
        let delta = q.get(s, a) - averaged.get(s, a);
        g_b[idx] += delta;
        if mode == GradientMode::Full {
            add_target_gradient(mdp, &avg_rows, s, a, delta, &mut g_b);
        }
    }
    let deviation = g_a.iter().zip(&g_b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()));
    Ok(GradientCheck {
        mode,
        deviation,
        holds: deviation <= 1e-10,
    })
}
