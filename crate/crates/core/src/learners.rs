//! Tabular offline learners: ICQL-QS, SPaCQL and a joint-CQL baseline.
//!
//! All three share one training engine. An algorithm is a choice of target
//! rule (soft-partial over deviation counts, or per-agent individual) and a
//! conservative penalty (per-agent counterfactuals, or the full joint policy).

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Transition, TransitionDataset};
use crate::decmdp::{policy_value, solve_q_star, DecMdp, JointActionSpace, QTable, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::operators::{replace_agents, sample_subset, validate_weights, EnsembleMin};
use crate::operators::BootstrapValue;
use crate::policies::{product_policy, FactorizedPolicy, JointPolicy, SoftmaxPolicyParams};
use crate::random::stream_rng;

const TAG_INIT: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_SUBSET: u64 = 3;
const TAG_ACTION: u64 = 4;
const TAG_BOOTSTRAP: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "spacql")]
    Spacql,
    #[serde(rename = "icql-qs")]
    IcqlQs,
    #[serde(rename = "jointcql")]
    JointCql,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Spacql, Algorithm::IcqlQs, Algorithm::JointCql];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Spacql => "spacql",
            Algorithm::IcqlQs => "icql-qs",
            Algorithm::JointCql => "jointcql",
        }
    }

    /// Target rule and penalty this algorithm trains with.
    pub fn engine(self, config: &LearnerConfig, n_agents: usize) -> EngineSpec {
        match self {
            Algorithm::Spacql => EngineSpec {
                target: TargetRule::SoftPartial { forced: None },
                penalty: PenaltyKind::PerAgent(config.agent_penalty_weights(n_agents)),
            },
            Algorithm::IcqlQs => EngineSpec {
                target: TargetRule::Individual,
                penalty: PenaltyKind::PerAgent(vec![config.icql_lambda / n_agents as f64; n_agents]),
            },
            Algorithm::JointCql => {
                let mut e_n = vec![0.0; n_agents];
                e_n[n_agents - 1] = 1.0;
                EngineSpec {
                    target: TargetRule::SoftPartial { forced: Some(e_n) },
                    penalty: PenaltyKind::Joint(config.alpha),
                }
            }
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "spacql" => Ok(Algorithm::Spacql),
            "icql-qs" | "icqlqs" => Ok(Algorithm::IcqlQs),
            "jointcql" | "joint-cql" => Ok(Algorithm::JointCql),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintySource {
    /// Current (trained) members.
    Current,
    /// Target members.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub ensemble_size: usize,
    pub alpha: f64,
    /// Per-agent penalty weights; `None` means `1/n` each.
    pub lambdas: Option<Vec<f64>>,
    pub icql_lambda: f64,
    pub tau: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub u_min: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Members start uniform in `±init_spread/(1-γ)`.
    pub init_spread: f64,
    pub uncertainty_source: UncertaintySource,
    /// All members train on the same batch instead of their own.
    pub shared_batches: bool,
    /// Each member draws its batches from its own bootstrap resample of the dataset.
    pub bootstrap: bool,
    /// Greedy value is logged every this many steps when an mdp is given; 0 disables.
    pub eval_every: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 10,
            alpha: 1.0,
            lambdas: None,
            icql_lambda: 1.0,
            tau: 0.005,
            lr_q: 0.1,
            lr_pi: 0.01,
            batch_size: 32,
            steps: 2000,
            u_min: 1e-6,
            temperature: 1.0,
            seed: 0,
            init_spread: 0.05,
            uncertainty_source: UncertaintySource::Current,
            shared_batches: false,
            bootstrap: false,
            eval_every: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ensemble_size < 2 {
            return bad(format!("ensemble_size {} < 2", self.ensemble_size));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.u_min > 0.0) {
            return bad(format!("u_min {} must be positive", self.u_min));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_q > 0.0) || !(self.lr_pi >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.alpha >= 0.0) || !(self.icql_lambda >= 0.0) || !(self.init_spread >= 0.0) {
            return bad("alpha, icql_lambda and init_spread must be non-negative".into());
        }
        if let Some(l) = &self.lambdas {
            if l.len() != n_agents || l.iter().any(|x| !(*x >= 0.0)) {
                return bad(format!("lambdas {l:?} must be {n_agents} non-negative values"));
            }
        }
        Ok(())
    }

    /// `α λ_i` per agent.
    pub fn agent_penalty_weights(&self, n_agents: usize) -> Vec<f64> {
        match &self.lambdas {
            Some(l) => l.iter().map(|x| self.alpha * x).collect(),
            None => vec![self.alpha / n_agents as f64; n_agents],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetRule {
    /// `r + γ Σ_k w_k min_j Q̄_j(s', a'^(k))`; weights from inverse
    /// uncertainty unless forced.
    SoftPartial { forced: Option<Vec<f64>> },
    /// Mean over agents of `r + γ min_j Q̄_j(s', a'_{-i}, b_i)`.
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PenaltyKind {
    /// `Σ_i c_i (E_{b~π_i} Q(s, b, a_{-i}) - Q(s, a))` with logged companions.
    PerAgent(Vec<f64>),
    /// `c (E_{a~π} Q(s, a) - Q(s, a_logged))` over the full product policy.
    Joint(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSpec {
    pub target: TargetRule,
    pub penalty: PenaltyKind,
}

/// Trained members `θ_j` and their Polyak targets `θ̄_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QEnsemble {
    pub members: Vec<QTable>,
    pub targets: Vec<QTable>,
}

impl QEnsemble {
    /// Independent uniform members in `±spread/(1-γ)`; targets start equal.
    pub fn new(n_states: usize, n_joint: usize, gamma: f64, size: usize, spread: f64, seed: u64) -> Self {
        let width = spread / (1.0 - gamma);
        let members: Vec<QTable> = (0..size)
            .map(|j| {
                let mut q = QTable::zeros(n_states, n_joint, gamma);
                if width > 0.0 {
                    let mut rng = stream_rng(seed, &[TAG_INIT, j as u64]);
                    q.values.iter_mut().for_each(|v| *v = rng.random_range(-width..=width));
                }
                q.clip();
                q
            })
            .collect();
        Self {
            targets: members.clone(),
            members,
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// `θ̄ ← (1-τ) θ̄ + τ θ`.
    pub fn polyak(&mut self, tau: f64) {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            for (tv, mv) in t.values.iter_mut().zip(&m.values) {
                *tv = (1.0 - tau) * *tv + tau * mv;
            }
        }
    }

    /// Pessimistic target value `min_j Q̄_j(s,a)`.
    pub fn min_target(&self, s: usize, a: usize) -> f64 {
        EnsembleMin(&self.targets).value(s, a)
    }

    pub fn mean_target(&self, s: usize, a: usize) -> f64 {
        self.targets.iter().map(|q| q.get(s, a)).sum::<f64>() / self.targets.len() as f64
    }

    pub fn max_range(&self) -> f64 {
        self.members
            .iter()
            .chain(&self.targets)
            .map(QTable::range)
            .fold(0.0, f64::max)
    }
}

/// Population standard deviation, two-pass.
pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Std of current member values at `(s, a)`.
pub fn ensemble_uncertainty(ensemble: &QEnsemble, s: usize, a: usize) -> f64 {
    let vals: Vec<f64> = ensemble.members.iter().map(|q| q.get(s, a)).collect();
    population_std(&vals)
}

fn uncertainty_from(ensemble: &QEnsemble, source: UncertaintySource, s: usize, a: usize) -> f64 {
    let tables = match source {
        UncertaintySource::Current => &ensemble.members,
        UncertaintySource::Target => &ensemble.targets,
    };
    let vals: Vec<f64> = tables.iter().map(|q| q.get(s, a)).collect();
    population_std(&vals)
}

/// Inverse-uncertainty weights, each `u_k` floored at `u_min` first.
pub fn compute_weights(u: &[f64], u_min: f64) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::InvalidArgument("no uncertainties".into()));
    }
    let inv: Vec<f64> = u.iter().map(|x| 1.0 / x.max(u_min)).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|x| x / total).collect())
}

/// `Σ_k w_k k` with `w[k-1]` the weight of `k` deviations.
pub fn k_eff(w: &[f64]) -> f64 {
    w.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).sum()
}

/// Per-record details of the soft-partial target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDetail {
    pub y: f64,
    pub next_actions: Vec<usize>,
    pub subsets: Vec<Vec<usize>>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub pessimistic: Vec<f64>,
    /// Std across target members of the combined bootstrap value.
    pub target_std: f64,
}

/// Draws `a'^(k)` for a record from the keyed streams of `slot`.
fn draw_partial(
    space: &JointActionSpace,
    pi: &FactorizedPolicy,
    rec: &Transition,
    logged: usize,
    k: usize,
    subset_rng: &mut impl Rng,
    action_rng: &mut impl Rng,
) -> (Vec<usize>, usize) {
    let subset = sample_subset(space.n_agents(), k, subset_rng);
    let a = replace_agents(space, rec.next_state, logged, pi, &subset, action_rng);
    (subset, a)
}

fn keyed_rngs(seed: u64, step: u64, record: u64, slot: u64) -> (impl Rng, impl Rng) {
    (
        stream_rng(seed, &[TAG_SUBSET, step, record, slot]),
        stream_rng(seed, &[TAG_ACTION, step, record, slot]),
    )
}

/// Soft-partial target for one record.
///
/// Draws come from streams keyed by `(seed, step, record_key, k)`, so the
/// result is reproducible independent of batch order.
#[allow(clippy::too_many_arguments)]
pub fn spacql_target(
    rec: &Transition,
    ensemble: &QEnsemble,
    pi: &FactorizedPolicy,
    gamma: f64,
    config: &LearnerConfig,
    forced: Option<&[f64]>,
    step: u64,
    record_key: u64,
) -> Result<TargetDetail> {
    let space = pi.joint_space();
    let n = space.n_agents();
    let logged = rec.next_action.ok_or(Error::MissingNextAction {
        index: record_key as usize,
    })?;
    let mut detail = TargetDetail {
        y: 0.0,
        next_actions: Vec::with_capacity(n),
        subsets: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        w: Vec::new(),
        pessimistic: Vec::with_capacity(n),
        target_std: 0.0,
    };
    for k in 1..=n {
        let (mut srng, mut arng) = keyed_rngs(config.seed, step, record_key, (k - 1) as u64);
        let (subset, a_k) = draw_partial(&space, pi, rec, logged, k, &mut srng, &mut arng);
        detail
            .u
            .push(uncertainty_from(ensemble, config.uncertainty_source, rec.next_state, a_k));
        detail.pessimistic.push(ensemble.min_target(rec.next_state, a_k));
        detail.subsets.push(subset);
        detail.next_actions.push(a_k);
    }
    detail.w = match forced {
        Some(w) => {
            validate_weights(w, n)?;
            w.to_vec()
        }
        None => compute_weights(&detail.u, config.u_min)?,
    };
    let boot: f64 = detail.w.iter().zip(&detail.pessimistic).map(|(w, m)| w * m).sum();
    let bound = 1.0 / (1.0 - gamma);
    detail.y = (rec.reward + gamma * boot).clamp(-bound, bound);
    let combined: Vec<f64> = ensemble
        .targets
        .iter()
        .map(|q| {
            detail
                .w
                .iter()
                .zip(&detail.next_actions)
                .map(|(w, &a)| w * q.get(rec.next_state, a))
                .sum()
        })
        .collect();
    detail.target_std = population_std(&combined);
    Ok(detail)
}

/// Individual target: agent `i` alone deviates to `π_i`, averaged over agents.
/// Also fills the per-k draws so logs share one layout with the soft-partial rule.
fn individual_target(
    rec: &Transition,
    ensemble: &QEnsemble,
    pi: &FactorizedPolicy,
    gamma: f64,
    config: &LearnerConfig,
    step: u64,
    record_key: u64,
) -> Result<TargetDetail> {
    let n = pi.n_agents();
    let mut e1 = vec![0.0; n];
    e1[0] = 1.0;
    let mut detail = spacql_target(rec, ensemble, pi, gamma, config, Some(&e1), step, record_key)?;
    let space = pi.joint_space();
    let logged = rec.next_action.expect("checked above");
    let mut y_sum = 0.0;
    let mut combined = vec![0.0; ensemble.size()];
    for i in 0..n {
        let (_, mut arng) = keyed_rngs(config.seed, step, record_key, i as u64);
        let a_i = replace_agents(&space, rec.next_state, logged, pi, &[i], &mut arng);
        y_sum += rec.reward + gamma * ensemble.min_target(rec.next_state, a_i);
        for (c, q) in combined.iter_mut().zip(&ensemble.targets) {
            *c += q.get(rec.next_state, a_i) / n as f64;
        }
    }
    let bound = 1.0 / (1.0 - gamma);
    detail.y = (y_sum / n as f64).clamp(-bound, bound);
    detail.target_std = population_std(&combined);
    Ok(detail)
}

/// Adds the gradient of one record's conservative penalty into `grad` and
/// returns its value.
fn penalty_record(
    q: &QTable,
    rec: &Transition,
    pi: &FactorizedPolicy,
    space: &JointActionSpace,
    kind: &PenaltyKind,
    grad: &mut [f64],
) -> f64 {
    let s = rec.state;
    let base = s * q.n_joint;
    match kind {
        PenaltyKind::PerAgent(coeffs) => {
            let mut value = 0.0;
            for (i, &c) in coeffs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let mut expect = 0.0;
                for (b, &p) in pi.row(i, s).iter().enumerate() {
                    let a = space.replace(rec.action, i, b);
                    expect += p * q.get(s, a);
                    grad[base + a] += c * p;
                }
                grad[base + rec.action] -= c;
                value += c * (expect - q.get(s, rec.action));
            }
            value
        }
        PenaltyKind::Joint(c) => {
            if *c == 0.0 {
                return 0.0;
            }
            let row = pi.joint_row(s);
            let mut expect = 0.0;
            for (a, &p) in row.iter().enumerate() {
                expect += p * q.get(s, a);
                grad[base + a] += c * p;
            }
            grad[base + rec.action] -= c;
            c * (expect - q.get(s, rec.action))
        }
    }
}

/// Batch penalty value and its dense gradient w.r.t. the table entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `ξ_c = Σ_records Σ_i α λ_i (E_{b~π_i} Q(s, b, a_{-i}) - Q(s, a))`.
pub fn conservative_penalty(
    q: &QTable,
    batch: &[Transition],
    pi: &FactorizedPolicy,
    alpha: f64,
    lambdas: &[f64],
) -> Result<Penalty> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if lambdas.len() != pi.n_agents() {
        return Err(Error::Shape(format!("{} lambdas for {} agents", lambdas.len(), pi.n_agents())));
    }
    let space = pi.joint_space();
    let kind = PenaltyKind::PerAgent(lambdas.iter().map(|l| alpha * l).collect());
    let mut grad = vec![0.0; q.values.len()];
    let value = batch
        .iter()
        .map(|r| penalty_record(q, r, pi, &space, &kind, &mut grad))
        .sum();
    Ok(Penalty { value, grad })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Mean over members and records of `½(Q - Y)²`.
    pub td_loss: f64,
    /// Mean over members of the per-record penalty.
    pub penalty: f64,
    /// Batch means of `u_k`, `w_k`.
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub k_eff: f64,
    pub target_std: f64,
    /// Largest `max Q - min Q` over members and targets after the step.
    pub max_range: f64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub algorithm: Algorithm,
    pub n_agents: usize,
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// Header line with `algorithm`, `n_agents` and any `extra` fields, then one step per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>, extra: &serde_json::Map<String, serde_json::Value>) -> Result<()> {
        let mut header = serde_json::Map::new();
        header.insert("algorithm".into(), serde_json::to_value(self.algorithm)?);
        header.insert("n_agents".into(), self.n_agents.into());
        header.extend(extra.clone());
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        #[derive(Deserialize)]
        struct Header {
            algorithm: Algorithm,
            n_agents: usize,
        }
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| malformed("empty log".into()))?)
            .map_err(|e| malformed(format!("header: {e}")))?;
        let steps = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| malformed(format!("line {}: {e}", i + 2))))
            .collect::<Result<Vec<StepLog>>>()?;
        Ok(Self {
            algorithm: header.algorithm,
            n_agents: header.n_agents,
            steps,
        })
    }

    /// Mean of `w_k` over the steps in `[from, to)`.
    pub fn mean_weights(&self, from: usize, to: usize) -> Vec<f64> {
        let slice = &self.steps[from.min(self.steps.len())..to.min(self.steps.len())];
        let mut out = vec![0.0; self.n_agents];
        for s in slice {
            for (o, w) in out.iter_mut().zip(&s.w) {
                *o += w / slice.len() as f64;
            }
        }
        out
    }
}

/// Per-next-state average of logged weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTrace {
    pub n_agents: usize,
    /// `None` for states never bootstrapped from.
    pub per_state: Vec<Option<Vec<f64>>>,
    pub global: Vec<f64>,
}

impl WeightTrace {
    /// The same weights at every state.
    pub fn uniform_over_states(n_states: usize, w: Vec<f64>) -> Self {
        Self {
            n_agents: w.len(),
            per_state: vec![Some(w.clone()); n_states],
            global: w,
        }
    }

    /// Per-state weights, unseen states falling back to the global average.
    pub fn resolved(&self, s: usize) -> &[f64] {
        self.per_state[s].as_deref().unwrap_or(&self.global)
    }
}

#[derive(Debug, Clone)]
struct WeightAccumulator {
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl WeightAccumulator {
    fn new(n_states: usize, n_agents: usize) -> Self {
        Self {
            sums: vec![vec![0.0; n_agents]; n_states],
            counts: vec![0; n_states],
        }
    }

    fn add(&mut self, s: usize, w: &[f64]) {
        self.counts[s] += 1;
        self.sums[s].iter_mut().zip(w).for_each(|(a, b)| *a += b);
    }

    fn trace(&self) -> WeightTrace {
        let n_agents = self.sums.first().map_or(0, Vec::len);
        let total: u64 = self.counts.iter().sum();
        let mut global = vec![0.0; n_agents];
        let per_state = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(sum, &c)| {
                global.iter_mut().zip(sum).for_each(|(g, x)| *g += x);
                (c > 0).then(|| sum.iter().map(|x| x / c as f64).collect())
            })
            .collect();
        if total > 0 {
            global.iter_mut().for_each(|g| *g /= total as f64);
        } else {
            global = vec![1.0 / n_agents as f64; n_agents];
        }
        WeightTrace {
            n_agents,
            per_state,
            global,
        }
    }
}

/// Stepwise trainer; `train_*` drive it to completion.
pub struct Trainer<'a> {
    dataset: &'a TransitionDataset,
    mdp: Option<&'a DecMdp>,
    config: LearnerConfig,
    spec: EngineSpec,
    gamma: f64,
    space: JointActionSpace,
    ensemble: QEnsemble,
    policy: SoftmaxPolicyParams,
    step: usize,
    log: TrainLog,
    weights: WeightAccumulator,
    /// Per-member bootstrap resamples of record indices.
    pools: Option<Vec<Vec<usize>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a TransitionDataset,
        gamma: f64,
        algorithm: Algorithm,
        config: LearnerConfig,
        mdp: Option<&'a DecMdp>,
    ) -> Result<Self> {
        let n = dataset.n_agents();
        let spec = algorithm.engine(&config, n);
        Self::with_engine(dataset, gamma, algorithm, spec, config, mdp)
    }

    /// Trainer with an explicit target rule and penalty.
    pub fn with_engine(
        dataset: &'a TransitionDataset,
        gamma: f64,
        algorithm: Algorithm,
        spec: EngineSpec,
        config: LearnerConfig,
        mdp: Option<&'a DecMdp>,
    ) -> Result<Self> {
        let n = dataset.n_agents();
        config.validate(n)?;
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("gamma {gamma} outside (0, 1)")));
        }
        if let Some(index) = dataset.records.iter().position(|r| r.next_action.is_none()) {
            return Err(Error::MissingNextAction { index });
        }
        if let TargetRule::SoftPartial { forced: Some(w) } = &spec.target {
            validate_weights(w, n)?;
        }
        if let Some(m) = mdp {
            if m.n_states != dataset.header.n_states || m.action_counts != dataset.header.action_counts {
                return Err(Error::Shape("mdp does not match dataset".into()));
            }
        }
        let space = dataset.joint_space();
        let ns = dataset.header.n_states;
        let ensemble = QEnsemble::new(ns, space.size(), gamma, config.ensemble_size, config.init_spread, config.seed);
        let policy = SoftmaxPolicyParams::zeros(ns, space.action_counts(), config.temperature);
        let pools = config.bootstrap.then(|| {
            (0..config.ensemble_size)
                .map(|j| {
                    let mut rng = stream_rng(config.seed, &[TAG_BOOTSTRAP, j as u64]);
                    (0..dataset.len()).map(|_| rng.random_range(0..dataset.len())).collect()
                })
                .collect()
        });
        Ok(Self {
            pools,
            dataset,
            mdp,
            spec,
            gamma,
            ensemble,
            policy,
            step: 0,
            log: TrainLog {
                algorithm,
                n_agents: n,
                steps: Vec::with_capacity(config.steps),
            },
            weights: WeightAccumulator::new(ns, n),
            space,
            config,
        })
    }

    pub fn ensemble(&self) -> &QEnsemble {
        &self.ensemble
    }

    pub fn policy(&self) -> &SoftmaxPolicyParams {
        &self.policy
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn batch_indices(&self, member: usize) -> Vec<usize> {
        let key = if self.config.shared_batches { 0 } else { member };
        let mut rng = stream_rng(self.config.seed, &[TAG_BATCH, self.step as u64, key as u64]);
        let n = self.dataset.len();
        (0..self.config.batch_size)
            .map(|_| {
                let i = rng.random_range(0..n);
                self.pools.as_ref().map_or(i, |p| p[key][i])
            })
            .collect()
    }

    fn target(&self, record: usize, pi: &FactorizedPolicy) -> Result<TargetDetail> {
        let rec = &self.dataset.records[record];
        let (step, key) = (self.step as u64, record as u64);
        match &self.spec.target {
            TargetRule::SoftPartial { forced } => {
                spacql_target(rec, &self.ensemble, pi, self.gamma, &self.config, forced.as_deref(), step, key)
            }
            TargetRule::Individual => individual_target(rec, &self.ensemble, pi, self.gamma, &self.config, step, key),
        }
    }

    /// One gradient step on every member, a policy step, and a Polyak update.
    pub fn step(&mut self) -> Result<&StepLog> {
        let pi = self.policy.policy();
        let j_count = self.ensemble.size();
        let batches: Vec<Vec<usize>> = (0..j_count).map(|j| self.batch_indices(j)).collect();

        let mut targets: HashMap<usize, TargetDetail> = HashMap::new();
        for &r in batches.iter().flatten() {
            if let std::collections::hash_map::Entry::Vacant(e) = targets.entry(r) {
                e.insert(self.target(r, &pi)?);
            }
        }

        let b = self.config.batch_size as f64;
        let mut td_total = 0.0;
        let mut pen_total = 0.0;
        let mut grad = vec![0.0; self.ensemble.members[0].values.len()];
        for (q, batch) in self.ensemble.members.iter_mut().zip(&batches) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &r in batch {
                let rec = &self.dataset.records[r];
                let idx = rec.state * q.n_joint + rec.action;
                let delta = q.values[idx] - targets[&r].y;
                td_total += 0.5 * delta * delta / b;
                grad[idx] += delta;
                pen_total += penalty_record(q, rec, &pi, &self.space, &self.spec.penalty, &mut grad) / b;
            }
            for (v, g) in q.values.iter_mut().zip(&grad) {
                *v -= self.config.lr_q * g;
            }
            q.clip();
        }

        self.policy_step(&pi, &batches[0]);
        self.ensemble.polyak(self.config.tau);

        let n = self.space.n_agents();
        let mut u = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut target_std = 0.0;
        for &r in &batches[0] {
            let t = &targets[&r];
            for k in 0..n {
                u[k] += t.u[k] / b;
                w[k] += t.w[k] / b;
            }
            target_std += t.target_std / b;
            self.weights.add(self.dataset.records[r].next_state, &t.w);
        }

        self.step += 1;
        let value = match self.mdp {
            Some(mdp)
                if self.config.eval_every > 0
                    && (self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.steps) =>
            {
                Some(evaluate_learned(mdp, &self.policy.policy(), EvalMode::Greedy)?.value)
            }
            _ => None,
        };
        self.log.steps.push(StepLog {
            step: self.step,
            td_loss: td_total / j_count as f64,
            penalty: pen_total / j_count as f64,
            k_eff: k_eff(&w),
            u,
            w,
            target_std,
            max_range: self.ensemble.max_range(),
            value,
        });
        Ok(self.log.steps.last().expect("just pushed"))
    }

    /// Softmax-logit ascent on `E_{b~π_i} Q_1(s, b, a_{-i})` with logged companions.
    fn policy_step(&mut self, pi: &FactorizedPolicy, batch: &[usize]) {
        if self.config.lr_pi == 0.0 {
            return;
        }
        let q = &self.ensemble.members[0];
        let temp = self.config.temperature;
        let mut grads: Vec<Vec<f64>> = self.policy.logits.iter().map(|l| vec![0.0; l.len()]).collect();
        for &r in batch {
            let rec = &self.dataset.records[r];
            let s = rec.state;
            for (i, g) in grads.iter_mut().enumerate() {
                let probs = pi.row(i, s);
                let qs: Vec<f64> = (0..probs.len())
                    .map(|c| q.get(s, self.space.replace(rec.action, i, c)))
                    .collect();
                let baseline: f64 = probs.iter().zip(&qs).map(|(p, v)| p * v).sum();
                let m = probs.len();
                for c in 0..m {
                    g[s * m + c] += probs[c] * (qs[c] - baseline) / temp;
                }
            }
        }
        for (l, g) in self.policy.logits.iter_mut().zip(&grads) {
            for (lv, gv) in l.iter_mut().zip(g) {
                *lv += self.config.lr_pi * gv;
            }
        }
    }

    pub fn finish(self) -> TrainResult {
        TrainResult {
            weight_trace: self.weights.trace(),
            ensemble: self.ensemble,
            policy: self.policy,
            log: self.log,
        }
    }

    pub fn run(mut self) -> Result<TrainResult> {
        while self.step < self.config.steps {
            self.step()?;
        }
        Ok(self.finish())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub ensemble: QEnsemble,
    pub policy: SoftmaxPolicyParams,
    pub log: TrainLog,
    pub weight_trace: WeightTrace,
}

impl TrainResult {
    /// First member, the table the policy ascends on.
    pub fn q(&self) -> &QTable {
        &self.ensemble.members[0]
    }
}

pub fn train(
    algorithm: Algorithm,
    dataset: &TransitionDataset,
    gamma: f64,
    config: &LearnerConfig,
    mdp: Option<&DecMdp>,
) -> Result<TrainResult> {
    Trainer::new(dataset, gamma, algorithm, config.clone(), mdp)?.run()
}

pub fn train_icql_qs(dataset: &TransitionDataset, gamma: f64, config: &LearnerConfig, mdp: Option<&DecMdp>) -> Result<TrainResult> {
    train(Algorithm::IcqlQs, dataset, gamma, config, mdp)
}

pub fn train_spacql(dataset: &TransitionDataset, gamma: f64, config: &LearnerConfig, mdp: Option<&DecMdp>) -> Result<TrainResult> {
    train(Algorithm::Spacql, dataset, gamma, config, mdp)
}

pub fn train_joint_cql_baseline(
    dataset: &TransitionDataset,
    gamma: f64,
    config: &LearnerConfig,
    mdp: Option<&DecMdp>,
) -> Result<TrainResult> {
    train(Algorithm::JointCql, dataset, gamma, config, mdp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Greedy,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub value: f64,
    pub v_uniform: f64,
    pub v_optimal: f64,
    /// `None` when the optimal and uniform values coincide.
    pub score: Option<f64>,
}

/// `V*` and uniform-policy value, the two normalization anchors.
pub fn normalization_anchors(mdp: &DecMdp) -> Result<(f64, f64)> {
    let uniform = policy_value(mdp, &JointPolicy::uniform(mdp.n_states, mdp.n_joint()))?;
    let q_star = solve_q_star(mdp, DEFAULT_TOL)?;
    let v_star = mdp
        .initial_dist
        .iter()
        .enumerate()
        .map(|(s, d)| d * q_star.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok((uniform, v_star))
}

pub fn normalized_score(value: f64, v_uniform: f64, v_optimal: f64) -> Option<f64> {
    let span = v_optimal - v_uniform;
    // Anchors carry value-iteration error near 1e-9.
    (span.abs() > 1e-8).then(|| 100.0 * (value - v_uniform) / span)
}

/// Exact value of the product of `policy` (or of its greedy version).
pub fn evaluate_learned(mdp: &DecMdp, policy: &FactorizedPolicy, mode: EvalMode) -> Result<Evaluation> {
    let (v_uniform, v_optimal) = normalization_anchors(mdp)?;
    evaluate_with_anchors(mdp, policy, mode, v_uniform, v_optimal)
}

pub fn evaluate_with_anchors(
    mdp: &DecMdp,
    policy: &FactorizedPolicy,
    mode: EvalMode,
    v_uniform: f64,
    v_optimal: f64,
) -> Result<Evaluation> {
    let fp = match mode {
        EvalMode::Greedy => policy.greedy(),
        EvalMode::Softmax => policy.clone(),
    };
    let value = policy_value(mdp, &product_policy(&fp))?;
    Ok(Evaluation {
        value,
        v_uniform,
        v_optimal,
        score: normalized_score(value, v_uniform, v_optimal),
    })
}
