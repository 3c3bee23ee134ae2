//! Seed sweeps over tasks, behavior regimes and learners.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tasks::Task;
use super::{resolve_out_dir, resolve_workers};
use crate::datagen::{make_behavior, sample_dataset, BehaviorSpec, Regime, SamplingMode, TransitionDataset};
use crate::decmdp::DecMdp;
use crate::error::{Error, Result};
use crate::learners::{
    evaluate_with_anchors, normalization_anchors, train, Algorithm, EvalMode, LearnerConfig, TrainResult,
};
use crate::random::{random_mdp, stream_rng, InstanceShape};
use crate::theory::{spacql_bound, value_error_bound};

/// Where a sweep's mdp comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MdpSource {
    Builtin { task: Task },
    File { path: PathBuf },
    Random { shape: InstanceShape, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: MdpSource,
}

impl MdpSpec {
    pub fn builtin(task: Task) -> Self {
        Self {
            name: task.name().into(),
            source: MdpSource::Builtin { task },
        }
    }

    pub fn load(&self) -> Result<DecMdp> {
        match &self.source {
            MdpSource::Builtin { task } => Ok(task.build()),
            MdpSource::File { path } => DecMdp::load(path),
            MdpSource::Random { shape, seed } => Ok(random_mdp(shape, &mut stream_rng(*seed, &[0x6d_6470]))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub algorithm: Algorithm,
    /// The run seed replaces `config.seed`.
    #[serde(default)]
    pub config: LearnerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryToggles {
    /// Value-error bound slacks for each trained policy.
    pub bound_slacks: bool,
}

impl Default for TheoryToggles {
    fn default() -> Self {
        Self { bound_slacks: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub mdps: Vec<MdpSpec>,
    pub regimes: Vec<Regime>,
    pub dataset_sizes: Vec<usize>,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingMode,
    pub algorithms: Vec<AlgorithmSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub theory: TheoryToggles,
    /// Trace CSVs keep every this many steps.
    #[serde(default = "default_trace_stride")]
    pub trace_stride: usize,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_sampling() -> SamplingMode {
    SamplingMode::Trajectory
}

fn default_trace_stride() -> usize {
    10
}

/// Learner settings used by the built-in benchmark.
pub fn benchmark_learner_config() -> LearnerConfig {
    LearnerConfig {
        alpha: 0.1,
        tau: 0.05,
        lr_pi: 0.5,
        steps: 1500,
        bootstrap: true,
        ..LearnerConfig::default()
    }
}

impl ExperimentConfig {
    /// Three built-in tasks × four regimes × three learners × five seeds.
    pub fn default_benchmark() -> Self {
        let learner = benchmark_learner_config();
        Self {
            name: "benchmark".into(),
            mdps: Task::ALL.into_iter().map(MdpSpec::builtin).collect(),
            regimes: vec![Regime::Random, Regime::Medium, Regime::MediumReplay, Regime::Expert],
            dataset_sizes: vec![200],
            sampling: SamplingMode::Trajectory,
            algorithms: Algorithm::ALL
                .into_iter()
                .map(|algorithm| AlgorithmSpec {
                    algorithm,
                    config: learner.clone(),
                })
                .collect(),
            seeds: (0..5).collect(),
            output_dir: None,
            theory: TheoryToggles::default(),
            trace_stride: 10,
            workers: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mdps.is_empty() || self.regimes.is_empty() || self.algorithms.is_empty() || self.seeds.is_empty() {
            return bad("mdps, regimes, algorithms and seeds must be non-empty".into());
        }
        if self.dataset_sizes.is_empty() || self.dataset_sizes.contains(&0) {
            return bad("dataset_sizes must be non-empty and positive".into());
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return bad(format!("duplicate seeds in {:?}", self.seeds));
        }
        let names: BTreeSet<_> = self.mdps.iter().map(|m| &m.name).collect();
        if names.len() != self.mdps.len() {
            return bad("mdp names must be unique".into());
        }
        if self.trace_stride == 0 {
            return bad("trace_stride must be at least 1".into());
        }
        for m in &self.mdps {
            if let MdpSource::File { path } = &m.source {
                if !path.exists() {
                    return bad(format!("mdp file {} does not exist", path.display()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the config's JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Outcome of one (mdp, regime, size, algorithm, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mdp: String,
    pub regime: Regime,
    pub size: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub error: Option<String>,
    pub value: Option<f64>,
    pub score: Option<f64>,
    pub final_k_eff: Option<f64>,
    pub mean_u: Option<f64>,
    pub final_target_std: Option<f64>,
    /// Time-averaged `w_k`.
    pub mean_w: Vec<f64>,
    /// Largest ensemble range seen at any step.
    pub max_range: Option<f64>,
    pub t2_slack: Option<f64>,
    pub t4_slack: Option<f64>,
    pub mdp_hash: String,
    pub dataset_hash: Option<String>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn dir_name(&self) -> String {
        format!("{}_{}_n{}_{}_s{}", self.mdp, self.regime, self.size, self.algorithm, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mdp: String,
    pub regime: Regime,
    pub size: usize,
    pub algorithm: Algorithm,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub score_mean: Option<f64>,
    /// `None` with fewer than two successful seeds.
    pub score_std: Option<f64>,
    pub value_mean: Option<f64>,
    pub k_eff_mean: Option<f64>,
    pub u_mean: Option<f64>,
    pub target_std_mean: Option<f64>,
    pub t2_slack_mean: Option<f64>,
    pub t4_slack_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation.
fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl ResultsTable {
    pub fn from_runs(config_hash: &str, runs: &[RunRecord]) -> Self {
        let mut groups: BTreeMap<(String, String, usize, String), Vec<&RunRecord>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in runs {
            let key = (r.mdp.clone(), r.regime.name().to_string(), r.size, r.algorithm.name().to_string());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        let rows = order
            .iter()
            .map(|key| {
                let rs = &groups[key];
                let ok: Vec<&&RunRecord> = rs.iter().filter(|r| r.ok()).collect();
                let col = |f: fn(&RunRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
                let scores = col(|r| r.score);
                ResultRow {
                    mdp: rs[0].mdp.clone(),
                    regime: rs[0].regime,
                    size: rs[0].size,
                    algorithm: rs[0].algorithm,
                    n_seeds: rs.len(),
                    n_failed: rs.len() - ok.len(),
                    score_mean: mean(&scores),
                    score_std: sample_std(&scores),
                    value_mean: mean(&col(|r| r.value)),
                    k_eff_mean: mean(&col(|r| r.final_k_eff)),
                    u_mean: mean(&col(|r| r.mean_u)),
                    target_std_mean: mean(&col(|r| r.final_target_std)),
                    t2_slack_mean: mean(&col(|r| r.t2_slack)),
                    t4_slack_mean: mean(&col(|r| r.t4_slack)),
                }
            })
            .collect();
        Self {
            config_hash: config_hash.to_string(),
            rows,
        }
    }

    pub fn row(&self, mdp: &str, regime: Regime, algorithm: Algorithm) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.mdp == mdp && r.regime == regime && r.algorithm == algorithm)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "mdp", "regime", "size", "algorithm", "n_seeds", "n_failed", "score_mean", "score_std", "value_mean",
            "k_eff_mean", "u_mean", "target_std_mean", "t2_slack_mean", "t4_slack_mean",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.mdp.clone(),
                r.regime.name().into(),
                r.size.to_string(),
                r.algorithm.name().into(),
                r.n_seeds.to_string(),
                r.n_failed.to_string(),
                fmt_opt(r.score_mean),
                fmt_opt(r.score_std),
                fmt_opt(r.value_mean),
                fmt_opt(r.k_eff_mean),
                fmt_opt(r.u_mean),
                fmt_opt(r.target_std_mean),
                fmt_opt(r.t2_slack_mean),
                fmt_opt(r.t4_slack_mean),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| mdp | regime | size | algorithm | score | k_eff | u | target std | failed |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let score = match (r.score_mean, r.score_std) {
                (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
                (Some(m), None) => format!("{m:.1} (single seed)"),
                _ => "failed".into(),
            };
            let f2 = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {}/{} |\n",
                r.mdp,
                r.regime,
                r.size,
                r.algorithm,
                score,
                f2(r.k_eff_mean),
                f2(r.u_mean),
                f2(r.target_std_mean),
                r.n_failed,
                r.n_seeds
            ));
        }
        out
    }
}

/// Everything a sweep produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub table: ResultsTable,
    pub runs: Vec<RunRecord>,
    /// Per-run logs in `runs` order; `None` for failed runs.
    pub results: Vec<Option<TrainResult>>,
    /// SHA-256 of every CSV written, keyed by file name.
    pub output_hashes: BTreeMap<String, String>,
}

struct Prepared {
    name: String,
    mdp: DecMdp,
    hash: String,
    anchors: (f64, f64),
}

struct Unit {
    mdp: usize,
    regime: Regime,
    size: usize,
    seed: u64,
    algorithm: usize,
}

fn failed(p: &Prepared, u: &Unit, algorithm: Algorithm, error: &Error) -> RunRecord {
    RunRecord {
        mdp: p.name.clone(),
        regime: u.regime,
        size: u.size,
        algorithm,
        seed: u.seed,
        error: Some(error.to_string()),
        value: None,
        score: None,
        final_k_eff: None,
        mean_u: None,
        final_target_std: None,
        mean_w: Vec::new(),
        max_range: None,
        t2_slack: None,
        t4_slack: None,
        mdp_hash: p.hash.clone(),
        dataset_hash: None,
    }
}

fn build_dataset(p: &Prepared, regime: Regime, size: usize, mode: SamplingMode, seed: u64) -> Result<TransitionDataset> {
    let spec = BehaviorSpec::new(regime, seed);
    let behavior = make_behavior(&p.mdp, &spec)?;
    sample_dataset(&p.mdp, &behavior, &spec, size, mode, seed)
}

fn run_unit(
    config: &ExperimentConfig,
    p: &Prepared,
    u: &Unit,
) -> std::result::Result<(RunRecord, TrainResult), Box<RunRecord>> {
    let spec = &config.algorithms[u.algorithm];
    let fail = |e: Error| Box::new(failed(p, u, spec.algorithm, &e));
    let dataset = build_dataset(p, u.regime, u.size, config.sampling, u.seed).map_err(fail)?;
    let dataset_hash = hex::encode(Sha256::digest(dataset.to_bytes().map_err(fail)?));
    let learner = LearnerConfig {
        seed: u.seed,
        ..spec.config.clone()
    };
    let result = train(spec.algorithm, &dataset, p.mdp.gamma, &learner, Some(&p.mdp)).map_err(fail)?;
    let policy = result.policy.policy();
    let eval = evaluate_with_anchors(&p.mdp, &policy, EvalMode::Greedy, p.anchors.0, p.anchors.1).map_err(fail)?;
    let steps = &result.log.steps;
    let (t2_slack, t4_slack) = if config.theory.bound_slacks {
        let behavior = make_behavior(&p.mdp, &BehaviorSpec::new(u.regime, u.seed)).map_err(fail)?;
        let mu = behavior.marginals();
        let greedy = policy.greedy();
        let t2 = value_error_bound(&p.mdp, &greedy, mu, result.q()).map_err(fail)?;
        let t4 = spacql_bound(&p.mdp, &greedy, mu, result.q(), &result.weight_trace).map_err(fail)?;
        (Some(t2.slack), Some(t4.per_state.slack))
    } else {
        (None, None)
    };
    let record = RunRecord {
        mdp: p.name.clone(),
        regime: u.regime,
        size: u.size,
        algorithm: spec.algorithm,
        seed: u.seed,
        error: None,
        value: Some(eval.value),
        score: eval.score,
        final_k_eff: steps.last().map(|s| s.k_eff),
        mean_u: mean(&steps.iter().map(|s| s.u.iter().sum::<f64>() / s.u.len() as f64).collect::<Vec<_>>()),
        final_target_std: steps.last().map(|s| s.target_std),
        mean_w: result.log.mean_weights(0, steps.len()),
        max_range: steps.iter().map(|s| s.max_range).reduce(f64::max),
        t2_slack,
        t4_slack,
        mdp_hash: p.hash.clone(),
        dataset_hash: Some(dataset_hash),
    };
    Ok((record, result))
}

fn provenance_line(config_hash: &str, mdp_hashes: &[String]) -> String {
    format!("# config_hash={config_hash} mdp_hashes={}\n", mdp_hashes.join(","))
}

fn write_hashed(
    dir: &Path,
    name: &str,
    header: &str,
    body: &[u8],
    hashes: &mut BTreeMap<String, String>,
) -> Result<()> {
    let mut bytes = header.as_bytes().to_vec();
    bytes.extend_from_slice(body);
    fs::write(dir.join(name), &bytes)?;
    hashes.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
    Ok(())
}

fn runs_csv(runs: &[RunRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mdp", "regime", "size", "algorithm", "seed", "status", "value", "score", "final_k_eff", "mean_u",
        "final_target_std", "mean_w", "max_range", "t2_slack", "t4_slack", "mdp_hash", "dataset_hash",
    ])?;
    for r in runs {
        let mean_w = r.mean_w.iter().map(|w| format!("{w:.6}")).collect::<Vec<_>>().join(";");
        w.write_record([
            r.mdp.clone(),
            r.regime.name().into(),
            r.size.to_string(),
            r.algorithm.name().into(),
            r.seed.to_string(),
            r.error.clone().map_or("ok".into(), |e| format!("failed: {e}")),
            fmt_opt(r.value),
            fmt_opt(r.score),
            fmt_opt(r.final_k_eff),
            fmt_opt(r.mean_u),
            fmt_opt(r.final_target_std),
            mean_w,
            fmt_opt(r.max_range),
            fmt_opt(r.t2_slack),
            fmt_opt(r.t4_slack),
            r.mdp_hash.clone(),
            r.dataset_hash.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Long-format weight and ensemble-std traces, subsampled by `stride`.
fn trace_csvs(runs: &[RunRecord], results: &[Option<TrainResult>], stride: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut weights = csv::Writer::from_writer(Vec::new());
    weights.write_record(["mdp", "regime", "size", "algorithm", "seed", "step", "k", "w", "w_normalized"])?;
    let mut uncertainty = csv::Writer::from_writer(Vec::new());
    uncertainty.write_record(["mdp", "regime", "size", "algorithm", "seed", "step", "target_std"])?;
    for (r, res) in runs.iter().zip(results) {
        let Some(res) = res else { continue };
        let series = super::report::report_weights(std::slice::from_ref(&res.log))?;
        let key = [r.mdp.clone(), r.regime.name().into(), r.size.to_string(), r.algorithm.name().into(), r.seed.to_string()];
        for (t, s) in res.log.steps.iter().enumerate() {
            if t % stride != 0 && t + 1 != res.log.steps.len() {
                continue;
            }
            for ws in &series[0] {
                let mut row = key.to_vec();
                row.extend([
                    s.step.to_string(),
                    ws.k.to_string(),
                    format!("{:.6}", ws.raw[t]),
                    format!("{:.6}", ws.normalized[t]),
                ]);
                weights.write_record(&row)?;
            }
            let mut row = key.to_vec();
            row.extend([s.step.to_string(), format!("{:.6}", s.target_std)]);
            uncertainty.write_record(&row)?;
        }
    }
    let io = |e: csv::IntoInnerError<csv::Writer<Vec<u8>>>| Error::Io(e.into_error());
    Ok((weights.into_inner().map_err(io)?, uncertainty.into_inner().map_err(io)?))
}

/// Runs every cell of the sweep and writes tables, traces and per-run artifacts
/// under `out_dir` (or the config's / environment's output directory).
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    config.validate()?;
    let out_dir = resolve_out_dir(out_dir, config.output_dir.as_deref());
    fs::create_dir_all(out_dir.join("runs"))?;
    let config_hash = config.hash();

    let prepared: Vec<Prepared> = config
        .mdps
        .iter()
        .map(|m| {
            let mdp = m.load()?;
            mdp.ensure_valid()?;
            let anchors = normalization_anchors(&mdp)?;
            Ok(Prepared {
                name: m.name.clone(),
                hash: mdp.content_hash(),
                mdp,
                anchors,
            })
        })
        .collect::<Result<_>>()?;

    let mut units = Vec::new();
    for mdp in 0..prepared.len() {
        for &regime in &config.regimes {
            for &size in &config.dataset_sizes {
                for algorithm in 0..config.algorithms.len() {
                    for &seed in &config.seeds {
                        units.push(Unit {
                            mdp,
                            regime,
                            size,
                            seed,
                            algorithm,
                        });
                    }
                }
            }
        }
    }

    let workers = resolve_workers(config.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| {
        units
            .par_iter()
            .map(|u| run_unit(config, &prepared[u.mdp], u))
            .collect()
    });

    let mdp_hashes: Vec<String> = prepared.iter().map(|p| p.hash.clone()).collect();
    let header = provenance_line(&config_hash, &mdp_hashes);
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut results = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Ok((rec, res)) => {
                let dir = out_dir.join("runs").join(rec.dir_name());
                fs::create_dir_all(&dir)?;
                let mut extra = serde_json::Map::new();
                extra.insert("config_hash".into(), config_hash.clone().into());
                extra.insert("mdp_hash".into(), rec.mdp_hash.clone().into());
                extra.insert("dataset_hash".into(), rec.dataset_hash.clone().into());
                res.log.write_jsonl(dir.join("trainlog.jsonl"), &extra)?;
                let tables = serde_json::json!({
                    "config_hash": config_hash,
                    "mdp_hash": rec.mdp_hash,
                    "ensemble": res.ensemble,
                    "policy": res.policy,
                    "weight_trace": res.weight_trace,
                });
                fs::write(dir.join("final.json"), serde_json::to_vec(&tables)?)?;
                runs.push(rec);
                results.push(Some(res));
            }
            Err(rec) => {
                runs.push(*rec);
                results.push(None);
            }
        }
    }

    let table = ResultsTable::from_runs(&config_hash, &runs);
    let mut hashes = BTreeMap::new();
    write_hashed(&out_dir, "results.csv", &header, &table.to_csv()?, &mut hashes)?;
    write_hashed(&out_dir, "runs.csv", &header, &runs_csv(&runs)?, &mut hashes)?;
    let (weights, uncertainty) = trace_csvs(&runs, &results, config.trace_stride)?;
    write_hashed(&out_dir, "weights.csv", &header, &weights, &mut hashes)?;
    write_hashed(&out_dir, "uncertainty.csv", &header, &uncertainty, &mut hashes)?;
    let md = format!(
        "<!-- config_hash={config_hash} mdp_hashes={} -->\n\n# {}\n\n{}",
        mdp_hashes.join(","),
        config.name,
        table.to_markdown()
    );
    fs::write(out_dir.join("results.md"), md)?;
    let manifest = serde_json::json!({
        "config_hash": config_hash,
        "config": config,
        "mdp_hashes": prepared.iter().map(|p| (p.name.clone(), p.hash.clone())).collect::<BTreeMap<_, _>>(),
        "output_hashes": hashes,
    });
    let mut f = fs::File::create(out_dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    Ok(ExperimentOutcome {
        out_dir,
        config_hash,
        table,
        runs,
        results,
        output_hashes: hashes,
    })
}
