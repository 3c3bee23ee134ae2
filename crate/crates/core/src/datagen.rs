//! Behavior policies for the dataset regimes, offline transition sampling and
//! the on-disk dataset format.
//!
//! A dataset file is a single JSON header line (mdp hash, behavior spec,
//! sampling mode, size, shape) followed by CSV records
//! `state,action,reward,next_state,next_action` with joint actions in the
//! mixed-radix encoding of [`crate::decmdp`]. An empty `next_action` marks a
//! record without a logged companion action.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::decmdp::{solve_q_star, DecMdp, JointActionSpace, QTable};
use crate::error::{Error, Result};
use crate::occupancy::occupancy_dist;
use crate::policies::{product_policy, softmax, FactorizedPolicy, JointPolicy};
use crate::random::{sample_index, stream_rng};

/// Softmax temperature of the expert component used by the mixed regimes.
pub const EXPERT_TEMPERATURE: f64 = 0.05;
/// Number of best-response sweeps when building expert behavior.
pub const EXPERT_SWEEPS: usize = 3;
/// Uniform-mixing weight at the end of the medium-replay sweep.
pub const REPLAY_FINAL_EPSILON: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Random,
    Medium,
    MediumReplay,
    Expert,
    Correlated,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Random,
        Regime::Medium,
        Regime::MediumReplay,
        Regime::Expert,
        Regime::Correlated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Random => "random",
            Regime::Medium => "medium",
            Regime::MediumReplay => "medium_replay",
            Regime::Expert => "expert",
            Regime::Correlated => "correlated",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown regime {s:?}")))
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How a behavior policy is built. `epsilon` is the expert temperature for
/// `expert` and the uniform-mixing weight for `medium` and `correlated`;
/// `rho` is the coupling strength of `correlated`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub regime: Regime,
    pub epsilon: f64,
    pub rho: f64,
    pub seed: u64,
}

impl BehaviorSpec {
    /// Spec with the regime's default parameters.
    pub fn new(regime: Regime, seed: u64) -> Self {
        let (epsilon, rho) = match regime {
            Regime::Random => (1.0, 0.0),
            Regime::Medium => (0.5, 0.0),
            Regime::MediumReplay => (1.0, 0.0),
            Regime::Expert => (EXPERT_TEMPERATURE, 0.0),
            Regime::Correlated => (0.5, 0.5),
        };
        Self {
            regime,
            epsilon,
            rho,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} not in [0,1]", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho {} not in [0,1]", self.rho)));
        }
        if self.regime != Regime::Correlated && self.rho != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "rho = {} given for factorized regime {}",
                self.rho, self.regime
            )));
        }
        Ok(())
    }
}

/// A behavior policy: exactly factorized, or a joint table with its marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    Factorized(FactorizedPolicy),
    Correlated {
        joint: JointPolicy,
        marginals: FactorizedPolicy,
    },
}

impl Behavior {
    pub fn joint(&self) -> JointPolicy {
        match self {
            Behavior::Factorized(fp) => product_policy(fp),
            Behavior::Correlated { joint, .. } => joint.clone(),
        }
    }

    pub fn marginals(&self) -> &FactorizedPolicy {
        match self {
            Behavior::Factorized(fp) => fp,
            Behavior::Correlated { marginals, .. } => marginals,
        }
    }
}

/// Per-agent value of each own action at `s`, with the other agents
/// marginalized under `policy`.
fn counterfactual_values(q: &QTable, policy: &FactorizedPolicy, agent: usize, s: usize) -> Vec<f64> {
    let space = policy.joint_space();
    let mut values = vec![0.0; policy.action_counts[agent]];
    for a in 0..space.size() {
        let mut w = 1.0;
        for j in 0..space.n_agents() {
            if j != agent {
                w *= policy.prob(j, s, space.component(a, j));
            }
        }
        values[space.component(a, agent)] += w * q.get(s, a);
    }
    values
}

/// Softmax of `values` divided by their spread; temperature 0 is argmax.
fn tempered_row(values: &[f64], temperature: f64) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread = hi - lo;
    if temperature == 0.0 || spread <= 1e-12 {
        if spread <= 1e-12 && temperature > 0.0 {
            return vec![1.0 / values.len() as f64; values.len()];
        }
        let best = crate::decmdp::argmax_first(values);
        return (0..values.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
    }
    let scaled: Vec<f64> = values.iter().map(|v| v / spread).collect();
    softmax(&scaled, temperature)
}

/// Per-agent best-response sweeps against `Q*`, starting from uniform
/// behavior. The temperature is relative to each state's value spread.
pub fn expert_policy(mdp: &DecMdp, temperature: f64) -> Result<FactorizedPolicy> {
    let q = solve_q_star(mdp, crate::decmdp::DEFAULT_TOL)?;
    let mut policy = FactorizedPolicy::uniform(mdp.n_states, &mdp.action_counts);
    for _ in 0..EXPERT_SWEEPS {
        for i in 0..mdp.n_agents {
            for s in 0..mdp.n_states {
                let values = counterfactual_values(&q, &policy, i, s);
                let row = tempered_row(&values, temperature);
                policy.row_mut(i, s).copy_from_slice(&row);
            }
        }
    }
    Ok(policy)
}

/// `(1-ε(s))·base + ε(s)·uniform`, row by row.
fn mix_with_uniform(base: &FactorizedPolicy, epsilon: impl Fn(usize) -> f64) -> FactorizedPolicy {
    let mut out = base.clone();
    for i in 0..base.n_agents() {
        let m = base.action_counts[i] as f64;
        for s in 0..base.n_states {
            let e = epsilon(s);
            for p in out.row_mut(i, s) {
                *p = (1.0 - e) * *p + e / m;
            }
        }
    }
    out
}

/// Quantile (comonotone) coupling of the per-agent rows at one state: each
/// agent orders its actions by decreasing probability and all agents read
/// off the same uniform draw.
pub fn comonotone_row(rows: &[&[f64]], space: &JointActionSpace) -> Vec<f64> {
    let orders: Vec<Vec<usize>> = rows
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut breaks: Vec<f64> = vec![0.0, 1.0];
    for (row, order) in rows.iter().zip(&orders) {
        let mut acc = 0.0;
        for &a in order {
            acc += row[a];
            breaks.push(acc.min(1.0));
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();

    let mut joint = vec![0.0; space.size()];
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let actions: Vec<usize> = rows
            .iter()
            .zip(&orders)
            .map(|(row, order)| {
                let mut acc = 0.0;
                for &a in order {
                    acc += row[a];
                    if mid < acc {
                        return a;
                    }
                }
                *order.iter().rev().find(|&&a| row[a] > 0.0).unwrap_or(&order[0])
            })
            .collect();
        joint[space.encode(&actions)] += hi - lo;
    }
    joint
}

fn correlated(marginals: FactorizedPolicy, rho: f64) -> Behavior {
    let space = marginals.joint_space();
    let mut probs = Vec::with_capacity(marginals.n_states * space.size());
    for s in 0..marginals.n_states {
        let rows: Vec<&[f64]> = (0..marginals.n_agents()).map(|i| marginals.row(i, s)).collect();
        let coupled = comonotone_row(&rows, &space);
        let product = marginals.joint_row(s);
        probs.extend(product.iter().zip(&coupled).map(|(p, c)| (1.0 - rho) * p + rho * c));
    }
    Behavior::Correlated {
        joint: JointPolicy::from_probs(marginals.n_states, space.size(), probs),
        marginals,
    }
}

/// Builds the behavior policy for a regime.
pub fn make_behavior(mdp: &DecMdp, spec: &BehaviorSpec) -> Result<Behavior> {
    spec.validate()?;
    mdp.ensure_valid()?;
    let uniform = FactorizedPolicy::uniform(mdp.n_states, &mdp.action_counts);
    Ok(match spec.regime {
        Regime::Random => Behavior::Factorized(uniform),
        Regime::Expert => Behavior::Factorized(expert_policy(mdp, spec.epsilon)?),
        Regime::Medium => {
            let expert = expert_policy(mdp, EXPERT_TEMPERATURE)?;
            Behavior::Factorized(mix_with_uniform(&expert, |_| spec.epsilon))
        }
        Regime::MediumReplay => {
            // States are ranked by a seeded permutation; the uniform weight
            // falls linearly from 1 to REPLAY_FINAL_EPSILON along the ranking,
            // as if each state were last visited at a different point of a
            // learning run.
            let expert = expert_policy(mdp, EXPERT_TEMPERATURE)?;
            let mut order: Vec<usize> = (0..mdp.n_states).collect();
            order.shuffle(&mut stream_rng(spec.seed, &[0x7265_706c]));
            let mut eps = vec![1.0; mdp.n_states];
            let denom = (mdp.n_states.max(2) - 1) as f64;
            for (rank, &s) in order.iter().enumerate() {
                eps[s] = 1.0 - (1.0 - REPLAY_FINAL_EPSILON) * rank as f64 / denom;
            }
            Behavior::Factorized(mix_with_uniform(&expert, |s| eps[s]))
        }
        Regime::Correlated => {
            let marginals = if spec.epsilon >= 1.0 {
                uniform
            } else {
                let expert = expert_policy(mdp, EXPERT_TEMPERATURE)?;
                mix_with_uniform(&expert, |_| spec.epsilon)
            };
            correlated(marginals, spec.rho)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// `s ~ d^μ`, `a ~ μ(·|s)`, `s' ~ P`, `a' ~ μ(·|s')`, independently per record.
    IidOccupancy,
    /// Consecutive steps of episodes that restart from `d0` with
    /// probability `1-γ` after every step.
    Trajectory,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" | "iid_occupancy" => Ok(SamplingMode::IidOccupancy),
            "traj" | "trajectory" => Ok(SamplingMode::Trajectory),
            other => Err(Error::InvalidArgument(format!("unknown sampling mode {other:?}"))),
        }
    }
}

/// One logged transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub next_action: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub mdp_hash: String,
    pub n_states: usize,
    pub action_counts: Vec<usize>,
    pub behavior: BehaviorSpec,
    pub mode: SamplingMode,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub header: DatasetHeader,
    pub records: Vec<Transition>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn joint_space(&self) -> JointActionSpace {
        JointActionSpace::new(&self.header.action_counts)
    }

    pub fn n_agents(&self) -> usize {
        self.header.action_counts.len()
    }

    /// Number of records per state.
    pub fn state_counts(&self) -> Vec<u64> {
        let mut counts = vec![0; self.header.n_states];
        for r in &self.records {
            counts[r.state] += 1;
        }
        counts
    }

    /// Checks every record against the generating mdp.
    pub fn verify(&self, mdp: &DecMdp) -> Result<()> {
        let hash = mdp.content_hash();
        if hash != self.header.mdp_hash {
            return Err(Error::HashMismatch {
                expected: self.header.mdp_hash.clone(),
                found: hash,
            });
        }
        if self.header.size != self.records.len() {
            return Err(Error::InvalidArgument(format!(
                "header size {} but {} records",
                self.header.size,
                self.records.len()
            )));
        }
        let na = mdp.n_joint();
        for (index, r) in self.records.iter().enumerate() {
            let bad = |reason: String| Error::InconsistentRecord { index, reason };
            if r.state >= mdp.n_states || r.next_state >= mdp.n_states {
                return Err(bad("state out of range".into()));
            }
            if r.action >= na || r.next_action.is_some_and(|a| a >= na) {
                return Err(bad("joint action out of range".into()));
            }
            let expected = mdp.r(r.state, r.action);
            if r.reward != expected {
                return Err(bad(format!("reward {} but R(s,a) = {expected}", r.reward)));
            }
            if !(mdp.p(r.state, r.action, r.next_state) > 0.0) {
                return Err(bad(format!("next state {} has zero probability", r.next_state)));
            }
        }
        Ok(())
    }

    /// Serialized bytes in the dataset file format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        out.push_str("state,action,reward,next_state,next_action\n");
        for r in &self.records {
            let next = r.next_action.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.state, r.action, r.reward, r.next_state, next);
        }
        Ok(out.into_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Reads a dataset file and verifies it against `mdp`.
    pub fn load(path: impl AsRef<Path>, mdp: &DecMdp) -> Result<Self> {
        let dataset = Self::load_unverified(path)?;
        dataset.verify(mdp)?;
        Ok(dataset)
    }

    /// Reads a dataset file without consulting an mdp.
    pub fn load_unverified(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let header: DatasetHeader =
            serde_json::from_str(first.trim_end()).map_err(|e| malformed(format!("header: {e}")))?;

        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut records = Vec::with_capacity(header.size);
        for (index, row) in csv.records().enumerate() {
            let row = row.map_err(|e| malformed(format!("record {index}: {e}")))?;
            if row.len() != 5 {
                return Err(malformed(format!("record {index}: expected 5 fields, got {}", row.len())));
            }
            let field = |i: usize| row.get(i).unwrap_or("");
            let parse_usize = |i: usize| {
                field(i)
                    .parse::<usize>()
                    .map_err(|e| malformed(format!("record {index} field {i}: {e}")))
            };
            let reward = field(2)
                .parse::<f64>()
                .map_err(|e| malformed(format!("record {index} reward: {e}")))?;
            let next_action = if field(4).is_empty() {
                None
            } else {
                Some(parse_usize(4)?)
            };
            records.push(Transition {
                state: parse_usize(0)?,
                action: parse_usize(1)?,
                reward,
                next_state: parse_usize(3)?,
                next_action,
            });
        }
        Ok(Self { header, records })
    }
}

/// Samples `size` transitions from `behavior` on `mdp`; reproducible per seed.
pub fn sample_dataset(
    mdp: &DecMdp,
    behavior: &Behavior,
    spec: &BehaviorSpec,
    size: usize,
    mode: SamplingMode,
    seed: u64,
) -> Result<TransitionDataset> {
    if size == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let joint = behavior.joint();
    if joint.n_states() != mdp.n_states || joint.n_joint() != mdp.n_joint() {
        return Err(Error::Shape("behavior does not match mdp".into()));
    }
    let mut rng = stream_rng(seed, &[0x6461_7461]);
    let mut records = Vec::with_capacity(size);
    let step = |s: usize, a: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let next_state = sample_index(mdp.next_dist(s, a), rng);
        let next_action = sample_index(joint.row(next_state), rng);
        Transition {
            state: s,
            action: a,
            reward: mdp.r(s, a),
            next_state,
            next_action: Some(next_action),
        }
    };
    match mode {
        SamplingMode::IidOccupancy => {
            let d = occupancy_dist(mdp, &joint)?;
            for _ in 0..size {
                let s = sample_index(&d, &mut rng);
                let a = sample_index(joint.row(s), &mut rng);
                records.push(step(s, a, &mut rng));
            }
        }
        SamplingMode::Trajectory => {
            use rand::Rng;
            let mut s = sample_index(&mdp.initial_dist, &mut rng);
            let mut a = sample_index(joint.row(s), &mut rng);
            for _ in 0..size {
                let t = step(s, a, &mut rng);
                records.push(t);
                if rng.random::<f64>() < mdp.gamma {
                    s = t.next_state;
                    a = t.next_action.expect("sampled records carry a'");
                } else {
                    s = sample_index(&mdp.initial_dist, &mut rng);
                    a = sample_index(joint.row(s), &mut rng);
                }
            }
        }
    }
    Ok(TransitionDataset {
        header: DatasetHeader {
            mdp_hash: mdp.content_hash(),
            n_states: mdp.n_states,
            action_counts: mdp.action_counts.clone(),
            behavior: spec.clone(),
            mode,
            size,
        },
        records,
    })
}

/// Normalized action counts per state, from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalConditionals {
    space: JointActionSpace,
    n_states: usize,
    state_counts: Vec<u64>,
    /// Flattened `[s][a]`.
    joint_counts: Vec<u64>,
}

impl EmpiricalConditionals {
    pub fn state_count(&self, s: usize) -> u64 {
        self.state_counts[s]
    }

    pub fn is_supported(&self, s: usize) -> bool {
        self.state_counts[s] > 0
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Empirical `μ̂(a|s)`; `None` marks a state absent from the data.
    pub fn joint(&self, s: usize) -> Option<Vec<f64>> {
        let n = self.state_counts[s];
        if n == 0 {
            return None;
        }
        let na = self.space.size();
        Some(
            self.joint_counts[s * na..(s + 1) * na]
                .iter()
                .map(|&c| c as f64 / n as f64)
                .collect(),
        )
    }

    /// Empirical distribution of the other agents' actions `a_{-i}` at `s`,
    /// indexed by [`JointActionSpace::others_index`].
    pub fn others(&self, s: usize, agent: usize) -> Option<Vec<f64>> {
        let joint = self.joint(s)?;
        let mut out = vec![0.0; self.space.others_size(agent)];
        for (a, p) in joint.iter().enumerate() {
            out[self.space.others_index(a, agent)] += p;
        }
        Some(out)
    }

    /// Empirical marginal of one agent's own action at `s`.
    pub fn marginal(&self, s: usize, agent: usize) -> Option<Vec<f64>> {
        let joint = self.joint(s)?;
        let mut out = vec![0.0; self.space.action_counts()[agent]];
        for (a, p) in joint.iter().enumerate() {
            out[self.space.component(a, agent)] += p;
        }
        Some(out)
    }
}

pub fn empirical_conditionals(dataset: &TransitionDataset) -> Result<EmpiricalConditionals> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let space = dataset.joint_space();
    let ns = dataset.header.n_states;
    let na = space.size();
    let mut state_counts = vec![0u64; ns];
    let mut joint_counts = vec![0u64; ns * na];
    for r in &dataset.records {
        state_counts[r.state] += 1;
        joint_counts[r.state * na + r.action] += 1;
    }
    Ok(EmpiricalConditionals {
        space,
        n_states: ns,
        state_counts,
        joint_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decmdp::policy_value;
    use crate::policies::{excess_correlation, tv_distance};
    use crate::random::{random_mdp, InstanceShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_mdp(seed: u64) -> DecMdp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_mdp(&InstanceShape::new(4, vec![2, 2], 0.9), &mut rng)
    }

    #[test]
    fn random_regime_is_uniform() {
        let mdp = small_mdp(1);
        let b = make_behavior(&mdp, &BehaviorSpec::new(Regime::Random, 0)).unwrap();
        for &p in b.joint().probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn correlated_regime_kappa() {
        let mdp = small_mdp(2);
        let mut spec = BehaviorSpec::new(Regime::Correlated, 0);
        spec.rho = 0.0;
        let b = make_behavior(&mdp, &spec).unwrap();
        let kappa = excess_correlation(&b.joint(), b.marginals(), true).unwrap();
        assert!(kappa < 1e-15);
        assert_eq!(b.joint(), product_policy(b.marginals()));

        spec.rho = 1.0;
        spec.epsilon = 1.0;
        let b = make_behavior(&mdp, &spec).unwrap();
        let kappa = excess_correlation(&b.joint(), b.marginals(), true).unwrap();
        assert!((kappa - 0.5).abs() < 1e-15);
    }

    #[test]
    fn comonotone_preserves_marginals() {
        let space = JointActionSpace::new(&[3, 2, 2]);
        let rows: [&[f64]; 3] = [&[0.2, 0.5, 0.3], &[0.9, 0.1], &[0.35, 0.65]];
        let joint = comonotone_row(&rows, &space);
        let total: f64 = joint.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (i, row) in rows.iter().enumerate() {
            let mut marginal = vec![0.0; row.len()];
            for (a, p) in joint.iter().enumerate() {
                marginal[space.component(a, i)] += p;
            }
            for (x, y) in marginal.iter().zip(row.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn factorized_regimes_reject_rho() {
        let mdp = small_mdp(3);
        let mut spec = BehaviorSpec::new(Regime::Medium, 0);
        spec.rho = 0.3;
        assert!(make_behavior(&mdp, &spec).is_err());
    }

    #[test]
    fn regime_quality_ordering() {
        for seed in 0..5 {
            let mdp = small_mdp(10 + seed);
            let value = |regime| {
                let b = make_behavior(&mdp, &BehaviorSpec::new(regime, seed)).unwrap();
                policy_value(&mdp, &b.joint()).unwrap()
            };
            let (rand, replay, expert) = (value(Regime::Random), value(Regime::MediumReplay), value(Regime::Expert));
            assert!(rand < replay && replay < expert, "{rand} {replay} {expert}");
        }
    }

    #[test]
    fn single_record_dataset_is_consistent() {
        let mdp = small_mdp(4);
        let spec = BehaviorSpec::new(Regime::Random, 0);
        let b = make_behavior(&mdp, &spec).unwrap();
        for mode in [SamplingMode::IidOccupancy, SamplingMode::Trajectory] {
            let data = sample_dataset(&mdp, &b, &spec, 1, mode, 5).unwrap();
            assert_eq!(data.len(), 1);
            data.verify(&mdp).unwrap();
        }
        assert!(sample_dataset(&mdp, &b, &spec, 0, SamplingMode::IidOccupancy, 5).is_err());
    }

    #[test]
    fn deterministic_system_gives_identical_records() {
        let mdp = DecMdp::new(vec![2, 2], 1, vec![1.0; 4], vec![0.1, 0.2, 0.3, 0.4], 0.9, vec![1.0]).unwrap();
        let fp = FactorizedPolicy::deterministic(1, &[2, 2], |i, _| i);
        let b = Behavior::Factorized(fp);
        let spec = BehaviorSpec::new(Regime::Expert, 0);
        let data = sample_dataset(&mdp, &b, &spec, 50, SamplingMode::Trajectory, 1).unwrap();
        assert!(data.records.iter().all(|r| *r == data.records[0]));
        assert_eq!(data.records[0].action, 2);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let mdp = small_mdp(5);
        let spec = BehaviorSpec::new(Regime::Medium, 3);
        let b = make_behavior(&mdp, &spec).unwrap();
        let a = sample_dataset(&mdp, &b, &spec, 500, SamplingMode::Trajectory, 9).unwrap();
        let c = sample_dataset(&mdp, &b, &spec, 500, SamplingMode::Trajectory, 9).unwrap();
        assert_eq!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
        let d = sample_dataset(&mdp, &b, &spec, 500, SamplingMode::Trajectory, 10).unwrap();
        assert_ne!(a.records, d.records);
    }

    #[test]
    fn iid_state_frequencies_match_occupancy() {
        let mdp = small_mdp(6);
        let spec = BehaviorSpec::new(Regime::Random, 0);
        let b = make_behavior(&mdp, &spec).unwrap();
        let n = 100_000;
        let data = sample_dataset(&mdp, &b, &spec, n, SamplingMode::IidOccupancy, 1).unwrap();
        let exact = occupancy_dist(&mdp, &b.joint()).unwrap();
        for (count, p) in data.state_counts().iter().zip(&exact) {
            let freq = *count as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * se, "{freq} vs {p}");
        }
    }

    fn record(state: usize, action: usize) -> Transition {
        Transition {
            state,
            action,
            reward: 0.0,
            next_state: 0,
            next_action: Some(0),
        }
    }

    fn dataset_of(records: Vec<Transition>, n_states: usize, action_counts: Vec<usize>) -> TransitionDataset {
        TransitionDataset {
            header: DatasetHeader {
                mdp_hash: String::new(),
                n_states,
                action_counts,
                behavior: BehaviorSpec::new(Regime::Random, 0),
                mode: SamplingMode::IidOccupancy,
                size: records.len(),
            },
            records,
        }
    }

    #[test]
    fn empirical_conditionals_examples() {
        let data = dataset_of(vec![record(0, 3); 4], 2, vec![2, 2]);
        let emp = empirical_conditionals(&data).unwrap();
        assert_eq!(emp.joint(0).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert!(emp.joint(1).is_none());
        assert!(emp.others(1, 0).is_none());

        // Joint 1 = (1,0) and joint 3 = (1,1): agent 1 differs.
        let data = dataset_of(vec![record(0, 1), record(0, 3)], 1, vec![2, 2]);
        let emp = empirical_conditionals(&data).unwrap();
        assert_eq!(emp.joint(0).unwrap(), vec![0.0, 0.5, 0.0, 0.5]);
        assert_eq!(emp.others(0, 0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(emp.marginal(0, 0).unwrap(), vec![0.0, 1.0]);

        assert!(empirical_conditionals(&dataset_of(vec![], 1, vec![2])).is_err());
    }

    #[test]
    fn empirical_conditionals_converge_to_behavior() {
        let mdp = small_mdp(7);
        let spec = BehaviorSpec::new(Regime::Medium, 0);
        let b = make_behavior(&mdp, &spec).unwrap();
        let data = sample_dataset(&mdp, &b, &spec, 100_000, SamplingMode::IidOccupancy, 2).unwrap();
        let emp = empirical_conditionals(&data).unwrap();
        let joint = b.joint();
        for s in 0..mdp.n_states {
            if emp.state_count(s) < 1000 {
                continue;
            }
            let est = emp.joint(s).unwrap();
            assert!(tv_distance(&est, joint.row(s)).unwrap() < 0.02);
            let marginals = FactorizedPolicy::from_tables(
                1,
                vec![2, 2],
                (0..2).map(|i| emp.marginal(s, i).unwrap()).collect(),
            );
            let est_joint = JointPolicy::from_probs(1, 4, est);
            assert!(excess_correlation(&est_joint, &marginals, true).unwrap() < 0.05);
        }
    }

    #[test]
    fn dataset_round_trip_and_tamper_detection() {
        let mdp = small_mdp(8);
        let spec = BehaviorSpec::new(Regime::Expert, 0);
        let b = make_behavior(&mdp, &spec).unwrap();
        let data = sample_dataset(&mdp, &b, &spec, 300, SamplingMode::Trajectory, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.save(&path).unwrap();
        let loaded = TransitionDataset::load(&path, &mdp).unwrap();
        assert_eq!(loaded, data);
        assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());

        let mut tampered = data.clone();
        tampered.records[17].reward += 0.5;
        tampered.save(&path).unwrap();
        match TransitionDataset::load(&path, &mdp) {
            Err(Error::InconsistentRecord { index, .. }) => assert_eq!(index, 17),
            other => panic!("expected inconsistent record, got {other:?}"),
        }

        let other = small_mdp(9);
        data.save(&path).unwrap();
        assert!(matches!(TransitionDataset::load(&path, &other), Err(Error::HashMismatch { .. })));

        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(TransitionDataset::load(&path, &mdp), Err(Error::Malformed { .. })));
    }
}
