//! Randomized verification suites for the divergence lemmas, operator
//! contraction, value-error bounds, gradient equivalence and sampled backups.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::Transition;
use crate::decmdp::{DecMdp, QTable};
use crate::error::{Error, Result};
use crate::learners::WeightTrace;
use crate::occupancy::{all_subsets, check_correlated_divergence, check_linear_divergence, check_product_difference};
use crate::operators::{
    averaged_individual_exact, contraction_check, individual_backup_exact, k_backup_exact,
    partial_replacement_expectation, sampled_backup, soft_partial_exact,
};
use crate::policies::{product_policy, FactorizedPolicy};
use crate::random::{
    dirichlet_uniform, random_factorized_policy, random_joint_policy, random_mdp, sample_index, stream_rng,
    InstanceShape,
};
use crate::theory::{
    gradient_equivalence_check, spacql_bound, value_error_bound, value_error_bound_corr,
    GradientMode,
};

pub const GAMMAS: [f64; 3] = [0.5, 0.9, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemma1,
    Lemma2,
    ProductDifference,
    Contraction,
    Bounds,
    Gradients,
    MonteCarlo,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Lemma1,
        Suite::Lemma2,
        Suite::ProductDifference,
        Suite::Contraction,
        Suite::Bounds,
        Suite::Gradients,
        Suite::MonteCarlo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Lemma2 => "lemma2",
            Suite::ProductDifference => "product_difference",
            Suite::Contraction => "contraction",
            Suite::Bounds => "bounds",
            Suite::Gradients => "gradients",
            Suite::MonteCarlo => "mc",
        }
    }

    /// Instance count used when none is given.
    pub fn default_instances(self) -> usize {
        match self {
            Suite::Lemma1 | Suite::Lemma2 | Suite::Bounds => 100,
            Suite::ProductDifference | Suite::Contraction | Suite::Gradients => 1000,
            Suite::MonteCarlo => 20,
        }
    }

    /// Expands a CLI group name: `lemmas`, `all`, or a single suite.
    pub fn parse_group(s: &str) -> Result<Vec<Suite>> {
        match s {
            "all" => Ok(Suite::ALL.to_vec()),
            "lemmas" => Ok(vec![Suite::Lemma1, Suite::Lemma2, Suite::ProductDifference]),
            other => Ok(vec![other.parse()?]),
        }
    }

    fn tag(self) -> u64 {
        0x7665_0000 + self as u64
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Suite::ALL
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub suite: Suite,
    pub instances: usize,
    pub checks: usize,
    pub violations: usize,
    /// Smallest `rhs - lhs` seen, where the suite has one.
    pub min_slack: Option<f64>,
    /// Suite-specific statistics.
    pub stats: BTreeMap<String, f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub summary: SuiteSummary,
    pub records: Vec<Value>,
}

impl SuiteReport {
    /// One line per record followed by a `{"summary": ...}` line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &json!({ "summary": self.summary }))?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

pub fn write_reports(path: impl AsRef<Path>, reports: &[SuiteReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in reports {
        r.write_jsonl(&mut f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn run_suite(suite: Suite, instances: usize, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Lemma1 => lemma1(instances, seed),
        Suite::Lemma2 => lemma2(instances, seed),
        Suite::ProductDifference => product_difference(instances, seed),
        Suite::Contraction => contraction(instances, seed),
        Suite::Bounds => bounds(instances, seed),
        Suite::Gradients => gradients(instances, seed),
        Suite::MonteCarlo => monte_carlo(instances, 100_000, seed),
    }
}

struct Tally {
    checks: usize,
    violations: usize,
    min_slack: Option<f64>,
    stats: BTreeMap<String, f64>,
}

impl Tally {
    fn new() -> Self {
        Self {
            checks: 0,
            violations: 0,
            min_slack: None,
            stats: BTreeMap::new(),
        }
    }

    fn check(&mut self, holds: bool, slack: Option<f64>) {
        self.checks += 1;
        if !holds {
            self.violations += 1;
        }
        if let Some(s) = slack {
            self.min_slack = Some(self.min_slack.map_or(s, |m: f64| m.min(s)));
        }
    }

    fn max_stat(&mut self, key: &str, v: f64) {
        let e = self.stats.entry(key.to_string()).or_insert(f64::NEG_INFINITY);
        *e = e.max(v);
    }

    fn add_stat(&mut self, key: &str, v: f64) {
        *self.stats.entry(key.to_string()).or_insert(0.0) += v;
    }

    fn finish(self, suite: Suite, instances: usize, records: Vec<Value>, passed: bool) -> SuiteReport {
        SuiteReport {
            summary: SuiteSummary {
                suite,
                instances,
                checks: self.checks,
                violations: self.violations,
                min_slack: self.min_slack,
                stats: self.stats,
                passed: passed && self.violations == 0,
            },
            records,
        }
    }
}

/// Random instance: at most 6 states, 3 agents, 3 actions each, `γ ∈ GAMMAS`.
pub fn random_instance<R: Rng>(rng: &mut R) -> DecMdp {
    let shape = InstanceShape::sample(6, 3, 3, &GAMMAS, rng);
    random_mdp(&shape, rng)
}

/// Uniform entries in `[-1/(1-γ), 1/(1-γ)]`, so the range condition holds.
pub fn random_q<R: Rng>(mdp: &DecMdp, rng: &mut R) -> QTable {
    let mut q = QTable::for_mdp(mdp);
    let b = q.bound();
    q.values.iter_mut().for_each(|v| *v = rng.random_range(-b..=b));
    q
}

fn instance_rngs(suite: Suite, seed: u64, n: usize) -> Vec<rand_chacha::ChaCha8Rng> {
    (0..n as u64).map(|i| stream_rng(seed, &[suite.tag(), i])).collect()
}

fn lemma1(instances: usize, seed: u64) -> Result<SuiteReport> {
    let per: Vec<Vec<Value>> = instance_rngs(Suite::Lemma1, seed, instances)
        .into_par_iter()
        .enumerate()
        .map(|(i, mut rng)| {
            let mdp = random_instance(&mut rng);
            let pi = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let mu = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let hash = mdp.content_hash();
            all_subsets(mdp.n_agents)
                .iter()
                .map(|s| {
                    let c = check_linear_divergence(&mdp, &pi, &mu, s)?;
                    Ok(json!({"suite": "lemma1", "instance": i, "mdp_hash": hash, "gamma": mdp.gamma, "check": c}))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let records: Vec<Value> = per.into_iter().flatten().collect();
    let mut t = Tally::new();
    for r in &records {
        let c = &r["check"];
        t.check(c["holds"].as_bool().unwrap_or(false), c["slack"].as_f64());
    }
    Ok(t.finish(Suite::Lemma1, instances, records, true))
}

fn lemma2(instances: usize, seed: u64) -> Result<SuiteReport> {
    let per: Vec<(Vec<Value>, f64)> = instance_rngs(Suite::Lemma2, seed, instances)
        .into_par_iter()
        .enumerate()
        .map(|(i, mut rng)| {
            let mdp = random_instance(&mut rng);
            let pi = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let mu_joint = random_joint_policy(mdp.n_states, mdp.n_joint(), &mut rng);
            let mu = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let product = product_policy(&mu);
            let hash = mdp.content_hash();
            let mut out = Vec::new();
            let mut kappa0_dev: f64 = 0.0;
            for s in all_subsets(mdp.n_agents) {
                let c = check_correlated_divergence(&mdp, &pi, &mu_joint, &s)?;
                out.push(json!({"suite": "lemma2", "instance": i, "mdp_hash": hash, "gamma": mdp.gamma, "check": c}));
                // A product behavior has no excess correlation and must reproduce the factorized check.
                let corr = check_correlated_divergence(&mdp, &pi, &product, &s)?;
                let lin = check_linear_divergence(&mdp, &pi, &mu, &s)?;
                kappa0_dev = kappa0_dev
                    .max((corr.lhs - lin.lhs).abs())
                    .max((corr.rhs - lin.rhs).abs());
                out.push(json!({"suite": "lemma2", "instance": i, "mdp_hash": hash, "gamma": mdp.gamma, "kappa_zero": true, "check": corr}));
            }
            Ok((out, kappa0_dev))
        })
        .collect::<Result<_>>()?;
    let mut t = Tally::new();
    let mut records = Vec::new();
    let mut dev: f64 = 0.0;
    for (rs, d) in per {
        dev = dev.max(d);
        records.extend(rs);
    }
    for r in &records {
        let c = &r["check"];
        t.check(c["holds"].as_bool().unwrap_or(false), c["slack"].as_f64());
    }
    t.max_stat("kappa_zero_max_deviation", dev);
    Ok(t.finish(Suite::Lemma2, instances, records, dev <= 1e-12))
}

fn product_difference(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new();
    let mut records = Vec::new();
    let mut n1_dev: f64 = 0.0;
    for (i, mut rng) in instance_rngs(Suite::ProductDifference, seed, trials).into_iter().enumerate() {
        let n = rng.random_range(1..=4);
        let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..=4)).collect();
        let p: Vec<Vec<f64>> = sizes.iter().map(|&m| dirichlet_uniform(m, &mut rng)).collect();
        let q: Vec<Vec<f64>> = sizes.iter().map(|&m| dirichlet_uniform(m, &mut rng)).collect();
        let c = check_product_difference(&p, &q)?;
        if n == 1 {
            n1_dev = n1_dev.max((c.lhs - c.rhs).abs());
        }
        t.check(c.holds, Some(c.rhs - c.lhs));
        records.push(json!({"suite": "product_difference", "trial": i, "n": n, "sizes": sizes, "check": c}));
    }
    // The single-agent case is the definition of TV.
    for (i, mut rng) in instance_rngs(Suite::ProductDifference, seed ^ 1, 100).into_iter().enumerate() {
        let m = rng.random_range(1..=6);
        let c = check_product_difference(&[dirichlet_uniform(m, &mut rng)], &[dirichlet_uniform(m, &mut rng)])?;
        n1_dev = n1_dev.max((c.lhs - c.rhs).abs());
        t.check(c.holds, Some(c.rhs - c.lhs));
        records.push(json!({"suite": "product_difference", "trial": trials + i, "n": 1, "sizes": [m], "check": c}));
    }
    t.max_stat("n1_max_deviation", n1_dev);
    Ok(t.finish(Suite::ProductDifference, trials, records, n1_dev == 0.0))
}

type Operator<'a> = Box<dyn Fn(&QTable) -> Result<QTable> + Sync + 'a>;

fn operators_for<'a>(mdp: &'a DecMdp, pi: &'a FactorizedPolicy, mu: &'a FactorizedPolicy, w: Vec<f64>) -> Vec<(String, Operator<'a>)> {
    let n = mdp.n_agents;
    let mut ops: Vec<(String, Operator<'a>)> = Vec::new();
    for i in 0..n {
        ops.push((format!("individual_{i}"), Box::new(move |q| individual_backup_exact(mdp, q, pi, mu, i))));
    }
    for k in 1..=n {
        ops.push((format!("k_{k}"), Box::new(move |q| k_backup_exact(mdp, q, pi, mu, k))));
    }
    ops.push(("soft_partial".into(), Box::new(move |q| soft_partial_exact(mdp, q, pi, mu, &w))));
    ops.push(("averaged_individual".into(), Box::new(move |q| averaged_individual_exact(mdp, q, pi, mu))));
    ops
}

fn contraction(pairs: usize, seed: u64) -> Result<SuiteReport> {
    let per: Vec<(Vec<Value>, f64)> = instance_rngs(Suite::Contraction, seed, pairs)
        .into_par_iter()
        .enumerate()
        .map(|(i, mut rng)| {
            let mdp = random_instance(&mut rng);
            let pi = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let mu = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let w = dirichlet_uniform(mdp.n_agents, &mut rng);
            let q1 = random_q(&mdp, &mut rng);
            let q2 = random_q(&mdp, &mut rng);
            let c = rng.random_range(-5.0..5.0);
            let mut shifted = q1.clone();
            shifted.values.iter_mut().for_each(|v| *v += c);
            let mut out = Vec::new();
            let mut shift_dev: f64 = 0.0;
            for (name, op) in operators_for(&mdp, &pi, &mu, w.clone()) {
                let check = contraction_check(&op, &q1, &q2, mdp.gamma)?;
                let eq = contraction_check(&op, &q1, &shifted, mdp.gamma)?;
                shift_dev = shift_dev.max((eq.lhs - mdp.gamma * c.abs()).abs());
                out.push(json!({
                    "suite": "contraction", "pair": i, "operator": name, "gamma": mdp.gamma,
                    "lhs": check.lhs, "rhs": check.rhs, "holds": check.holds,
                    "shift": c, "shift_lhs": eq.lhs,
                }));
            }
            Ok((out, shift_dev))
        })
        .collect::<Result<_>>()?;
    let mut t = Tally::new();
    let mut records = Vec::new();
    let mut dev: f64 = 0.0;
    for (rs, d) in per {
        dev = dev.max(d);
        records.extend(rs);
    }
    for r in &records {
        let slack = r["rhs"].as_f64().unwrap_or(0.0) - r["lhs"].as_f64().unwrap_or(0.0);
        t.check(r["holds"].as_bool().unwrap_or(false), Some(slack));
    }
    t.max_stat("constant_shift_max_deviation", dev);
    Ok(t.finish(Suite::Contraction, pairs, records, dev <= 1e-12))
}

/// Per-state Dirichlet weights, with some states left to the global fallback.
fn random_trace<R: Rng>(n_states: usize, n: usize, rng: &mut R) -> WeightTrace {
    WeightTrace {
        n_agents: n,
        per_state: (0..n_states)
            .map(|_| rng.random_bool(0.8).then(|| dirichlet_uniform(n, rng)))
            .collect(),
        global: dirichlet_uniform(n, rng),
    }
}

fn bounds(instances: usize, seed: u64) -> Result<SuiteReport> {
    let per: Vec<(Vec<Value>, f64)> = instance_rngs(Suite::Bounds, seed, instances)
        .into_par_iter()
        .enumerate()
        .map(|(i, mut rng)| {
            let mut out = Vec::new();
            let mdp = random_instance(&mut rng);
            let hash = mdp.content_hash();
            let pi = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let mu = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let qhat = random_q(&mdp, &mut rng);
            let t2 = value_error_bound(&mdp, &pi, &mu, &qhat)?;
            out.push(json!({"suite": "bounds", "instance": i, "mdp_hash": hash, "report": t2}));

            let mu_joint = random_joint_policy(mdp.n_states, mdp.n_joint(), &mut rng);
            let t3 = value_error_bound_corr(&mdp, &pi, &mu_joint, &qhat)?;
            out.push(json!({"suite": "bounds", "instance": i, "mdp_hash": hash, "report": t3}));

            let trace = random_trace(mdp.n_states, mdp.n_agents, &mut rng);
            let t4 = spacql_bound(&mdp, &pi, &mu, &qhat, &trace)?;
            out.push(json!({"suite": "bounds", "instance": i, "mdp_hash": hash, "variant": "per_state", "report": t4.per_state}));
            out.push(json!({"suite": "bounds", "instance": i, "mdp_hash": hash, "variant": "global", "report": t4.global}));

            // Identical agents make every per-agent TV equal; with all weight on
            // full replacement the two shift terms coincide.
            let m = rng.random_range(1..=3);
            let n = rng.random_range(1..=3);
            let shape = InstanceShape::new(rng.random_range(1..=6), vec![m; n], GAMMAS[i % GAMMAS.len()]);
            let eq_mdp = random_mdp(&shape, &mut rng);
            let p_rows: Vec<f64> = (0..shape.n_states).flat_map(|_| dirichlet_uniform(m, &mut rng)).collect();
            let q_rows: Vec<f64> = (0..shape.n_states).flat_map(|_| dirichlet_uniform(m, &mut rng)).collect();
            let eq_pi = FactorizedPolicy::from_tables(shape.n_states, vec![m; n], vec![p_rows; n]);
            let eq_mu = FactorizedPolicy::from_tables(shape.n_states, vec![m; n], vec![q_rows; n]);
            let eq_q = random_q(&eq_mdp, &mut rng);
            let mut e_n = vec![0.0; n];
            e_n[n - 1] = 1.0;
            let b2 = value_error_bound(&eq_mdp, &eq_pi, &eq_mu, &eq_q)?;
            let b4 = spacql_bound(&eq_mdp, &eq_pi, &eq_mu, &eq_q, &WeightTrace::uniform_over_states(shape.n_states, e_n))?;
            let dev = (b2.shift - b4.per_state.shift)
                .abs()
                .max((b2.rhs - b4.per_state.rhs).abs())
                .max((b2.shift - b4.global.shift).abs());
            out.push(json!({"suite": "bounds", "instance": i, "variant": "degenerate_t2", "report": b2}));
            out.push(json!({"suite": "bounds", "instance": i, "variant": "degenerate_t4", "report": b4.per_state, "deviation": dev}));
            Ok((out, dev))
        })
        .collect::<Result<_>>()?;
    let mut t = Tally::new();
    let mut records = Vec::new();
    let mut dev: f64 = 0.0;
    for (rs, d) in per {
        dev = dev.max(d);
        records.extend(rs);
    }
    for r in &records {
        let rep = &r["report"];
        t.check(rep["holds"].as_bool().unwrap_or(false), rep["slack"].as_f64());
    }
    t.max_stat("degenerate_max_deviation", dev);
    Ok(t.finish(Suite::Bounds, instances, records, dev <= 1e-12))
}

/// A batch of 1 to 16 transitions drawn uniformly over `(s, a)` with logged next actions.
pub fn random_batch<R: Rng>(mdp: &DecMdp, rng: &mut R) -> Vec<Transition> {
    let len = rng.random_range(1..=16);
    (0..len)
        .map(|_| {
            let state = rng.random_range(0..mdp.n_states);
            let action = rng.random_range(0..mdp.n_joint());
            let next_state = sample_index(mdp.next_dist(state, action), rng);
            Transition {
                state,
                action,
                reward: mdp.r(state, action),
                next_state,
                next_action: Some(rng.random_range(0..mdp.n_joint())),
            }
        })
        .collect()
}

fn gradients(batches: usize, seed: u64) -> Result<SuiteReport> {
    let per: Vec<Value> = instance_rngs(Suite::Gradients, seed, batches)
        .into_par_iter()
        .enumerate()
        .map(|(i, mut rng)| {
            // Multi-agent instances only: with one agent the two losses coincide in both modes.
            let n = rng.random_range(2..=3);
            let counts: Vec<usize> = (0..n).map(|_| rng.random_range(2..=3)).collect();
            let gamma = GAMMAS[rng.random_range(0..GAMMAS.len())];
            let mdp = random_mdp(&InstanceShape::new(rng.random_range(1..=6), counts, gamma), &mut rng);
            let pi = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let mu = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
            let q = random_q(&mdp, &mut rng);
            let batch = random_batch(&mdp, &mut rng);
            let semi = gradient_equivalence_check(&mdp, &batch, &q, &pi, &mu, GradientMode::Semi)?;
            let full = gradient_equivalence_check(&mdp, &batch, &q, &pi, &mu, GradientMode::Full)?;
            Ok(json!({
                "suite": "gradients", "batch": i, "n_agents": n, "batch_len": batch.len(),
                "semi_deviation": semi.deviation, "semi_holds": semi.holds,
                "full_deviation": full.deviation,
            }))
        })
        .collect::<Result<_>>()?;
    let mut t = Tally::new();
    let mut full_separated = 0usize;
    for r in &per {
        let semi = r["semi_deviation"].as_f64().unwrap_or(f64::INFINITY);
        t.check(r["semi_holds"].as_bool().unwrap_or(false), Some(1e-10 - semi));
        t.max_stat("semi_max_deviation", semi);
        if r["full_deviation"].as_f64().unwrap_or(0.0) > 1e-6 {
            full_separated += 1;
        }
    }
    let frac = full_separated as f64 / batches.max(1) as f64;
    t.add_stat("full_separated_fraction", frac);
    Ok(t.finish(Suite::Gradients, batches, per, frac >= 0.95))
}

/// Sampled partial-replacement backups against their exact conditional expectation.
pub fn monte_carlo(records: usize, draws: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed, &[Suite::MonteCarlo.tag()]);
    let mdp = random_mdp(&InstanceShape::new(4, vec![3, 2, 3], 0.9), &mut rng);
    let pi = random_factorized_policy(mdp.n_states, &mdp.action_counts, &mut rng);
    let q = random_q(&mdp, &mut rng);
    let fixed: Vec<(Transition, usize)> = (0..records)
        .map(|_| {
            let rec = random_batch(&mdp, &mut rng)[0];
            (rec, rng.random_range(1..=mdp.n_agents))
        })
        .collect();
    let per: Vec<Value> = fixed
        .par_iter()
        .enumerate()
        .map(|(i, (rec, k))| {
            let mut r = stream_rng(seed, &[Suite::MonteCarlo.tag(), i as u64]);
            let copies = vec![*rec; draws];
            let target = sampled_backup(&copies, &q, &pi, mdp.gamma, *k, &mut r)?;
            let n = draws as f64;
            let mean = target.values.iter().sum::<f64>() / n;
            let var = target.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let exact = rec.reward
                + mdp.gamma
                    * partial_replacement_expectation(&q, &pi, rec.next_state, rec.next_action.unwrap_or(0), *k)?;
            let z = if se > 0.0 { (mean - exact).abs() / se } else if mean == exact { 0.0 } else { f64::INFINITY };
            Ok(json!({
                "suite": "mc", "record": i, "k": k, "draws": draws,
                "mean": mean, "exact": exact, "std_error": se, "z": z, "holds": z <= 3.0,
            }))
        })
        .collect::<Result<_>>()?;
    let mut t = Tally::new();
    for r in &per {
        let z = r["z"].as_f64().unwrap_or(f64::INFINITY);
        t.check(r["holds"].as_bool().unwrap_or(false), Some(3.0 - z));
        t.max_stat("max_z", z);
    }
    Ok(t.finish(Suite::MonteCarlo, records, per, true))
}
