use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use parlab::datagen::{make_behavior, sample_dataset, BehaviorSpec, Regime, SamplingMode, TransitionDataset};
use parlab::decmdp::DecMdp;
use parlab::harness::experiment::{run_experiment, ExperimentConfig};
use parlab::harness::report::{report_uncertainty, report_weights};
use parlab::harness::tasks::Task;
use parlab::harness::verify::{run_suite, write_reports, Suite};
use parlab::learners::{evaluate_learned, train, Algorithm, EvalMode, LearnerConfig, TrainLog};
use parlab::policies::{AnyPolicy, PolicyFile};
use parlab::random::{random_mdp, stream_rng, InstanceShape};

#[derive(Parser)]
#[command(name = "parlab", version, about = "Partial action replacement for offline multi-agent Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in task or a random instance as JSON.
    GenMdp(GenMdp),
    /// Sample an offline dataset from an mdp.
    GenDataset(GenDataset),
    /// Train one learner on a dataset.
    Train(Train),
    /// Run randomized checks of the bounds and operator properties.
    VerifyTheory(VerifyTheory),
    /// Run a full experiment sweep.
    Run(Run),
    /// Build plot-ready CSVs from training logs.
    #[command(subcommand)]
    Report(Report),
}

#[derive(Args)]
struct GenMdp {
    /// Built-in task: meeting, switch_chain or penalty_game.
    #[arg(long, conflicts_with = "states")]
    task: Option<String>,
    #[arg(long)]
    states: Option<usize>,
    /// Comma-separated action counts, one per agent.
    #[arg(long, default_value = "2,2")]
    actions: String,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataset {
    /// Mdp JSON file.
    #[arg(long, conflicts_with = "task")]
    mdp: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value = "random")]
    regime: String,
    #[arg(long, default_value_t = 1000)]
    size: usize,
    /// `trajectory` or `iid`.
    #[arg(long, default_value = "trajectory")]
    mode: String,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long, default_value = "spacql")]
    algo: String,
    #[arg(long)]
    dataset: PathBuf,
    /// Mdp the dataset was drawn from; enables evaluation and hash checks.
    #[arg(long, conflicts_with = "task")]
    mdp: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Learner config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyTheory {
    /// lemmas, all, or one of lemma1, lemma2, product_difference, contraction, bounds, gradients, mc.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Instances per suite; defaults to each suite's standard count.
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Run {
    /// Experiment config JSON; the built-in benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the built-in benchmark config and exit.
    #[arg(long)]
    print_default: bool,
}

#[derive(Subcommand)]
enum Report {
    /// Min-max normalized weight series for each log.
    Weights {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired ensemble-std series of two logs.
    Uncertainty {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse<T: FromStr>(s: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    Ok(s.parse::<T>()?)
}

fn load_mdp(path: Option<&Path>, task: Option<&str>) -> Result<Option<DecMdp>> {
    match (path, task) {
        (Some(p), _) => Ok(Some(DecMdp::load(p).with_context(|| format!("loading {}", p.display()))?)),
        (None, Some(t)) => Ok(Some(parse::<Task>(t)?.build())),
        (None, None) => Ok(None),
    }
}

fn gen_mdp(a: GenMdp) -> Result<()> {
    let mdp = match (a.task, a.states) {
        (Some(t), _) => parse::<Task>(&t)?.build(),
        (None, Some(states)) => {
            let counts = a
                .actions
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .context("--actions must be comma-separated integers")?;
            let shape = InstanceShape::new(states, counts, a.gamma);
            random_mdp(&shape, &mut stream_rng(a.seed, &[0x6d_6470]))
        }
        (None, None) => bail!("give --task or --states"),
    };
    mdp.ensure_valid()?;
    mdp.save(&a.out)?;
    println!("{} {}", a.out.display(), mdp.content_hash());
    Ok(())
}

fn gen_dataset(a: GenDataset) -> Result<()> {
    let mdp = load_mdp(a.mdp.as_deref(), a.task.as_deref())?.context("give --mdp or --task")?;
    let mut spec = BehaviorSpec::new(parse::<Regime>(&a.regime)?, a.seed);
    if let Some(e) = a.epsilon {
        spec.epsilon = e;
    }
    if let Some(r) = a.rho {
        spec.rho = r;
    }
    spec.validate()?;
    let behavior = make_behavior(&mdp, &spec)?;
    let ds = sample_dataset(&mdp, &behavior, &spec, a.size, parse::<SamplingMode>(&a.mode)?, a.seed)?;
    ds.save(&a.out)?;
    println!("{} records -> {}", ds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let algo = parse::<Algorithm>(&a.algo)?;
    let mdp = load_mdp(a.mdp.as_deref(), a.task.as_deref())?;
    let ds = match &mdp {
        Some(m) => TransitionDataset::load(&a.dataset, m)?,
        None => TransitionDataset::load_unverified(&a.dataset)?,
    };
    let config: LearnerConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => LearnerConfig::default(),
    };
    let gamma = match (a.gamma, &mdp) {
        (Some(g), _) => g,
        (None, Some(m)) => m.gamma,
        (None, None) => bail!("give --gamma when training without an mdp"),
    };
    let result = train(algo, &ds, gamma, &config, mdp.as_ref())?;
    fs::create_dir_all(&a.out)?;
    let mut extra = serde_json::Map::new();
    extra.insert("mdp_hash".into(), ds.header.mdp_hash.clone().into());
    result.log.write_jsonl(a.out.join("trainlog.jsonl"), &extra)?;
    fs::write(a.out.join("ensemble.json"), serde_json::to_vec(&result.ensemble)?)?;
    PolicyFile {
        mdp_hash: ds.header.mdp_hash.clone(),
        policy: AnyPolicy::Factorized(result.policy.policy()),
    }
    .save(a.out.join("policy.json"))?;
    if let Some(m) = &mdp {
        let eval = evaluate_learned(m, &result.policy.policy(), EvalMode::Greedy)?;
        fs::write(a.out.join("evaluation.json"), serde_json::to_vec_pretty(&eval)?)?;
        match eval.score {
            Some(s) => println!("value {:.4} normalized score {s:.1}", eval.value),
            None => println!("value {:.4} (degenerate normalization)", eval.value),
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn verify_theory(a: VerifyTheory) -> Result<()> {
    let suites = Suite::parse_group(&a.suite)?;
    let mut reports = Vec::new();
    let mut failed = false;
    for s in suites {
        let r = run_suite(s, a.instances.unwrap_or(s.default_instances()), a.seed)?;
        let m = &r.summary;
        println!(
            "{:<20} {} checks={} violations={} min_slack={}",
            s.name(),
            if m.passed { "PASS" } else { "FAIL" },
            m.checks,
            m.violations,
            m.min_slack.map_or("-".into(), |x| format!("{x:.3e}"))
        );
        for (k, v) in &m.stats {
            println!("{:<20}   {k}={v:.3e}", "");
        }
        failed |= !m.passed;
        reports.push(r);
    }
    if let Some(out) = &a.out {
        write_reports(out, &reports)?;
    }
    if failed {
        bail!("verification failed");
    }
    Ok(())
}

fn run(a: Run) -> Result<()> {
    let config = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_benchmark(),
    };
    if a.print_default {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let out = run_experiment(&config, a.out.as_deref())?;
    println!("{}", out.table.to_markdown());
    let failed = out.runs.iter().filter(|r| !r.ok()).count();
    println!("{} runs, {failed} failed; outputs in {}", out.runs.len(), out.out_dir.display());
    Ok(())
}

fn report(r: Report) -> Result<()> {
    match r {
        Report::Weights { logs, out } => {
            let loaded = logs.iter().map(TrainLog::read_jsonl).collect::<Result<Vec<_>, _>>()?;
            let series = report_weights(&loaded)?;
            let mut text = String::from("log,algorithm,step,k,w,w_normalized\n");
            for (i, (log, set)) in loaded.iter().zip(&series).enumerate() {
                for ws in set {
                    for ((step, w), wn) in ws.steps.iter().zip(&ws.raw).zip(&ws.normalized) {
                        text.push_str(&format!("{i},{},{step},{},{w:.6},{wn:.6}\n", log.algorithm, ws.k));
                    }
                }
            }
            fs::write(&out, text)?;
        }
        Report::Uncertainty { a, b, out } => {
            let (la, lb) = (TrainLog::read_jsonl(&a)?, TrainLog::read_jsonl(&b)?);
            let rep = report_uncertainty(&la, &lb)?;
            if let Some(note) = &rep.note {
                eprintln!("note: {note}");
            }
            let mut bytes = Vec::new();
            if let Some(note) = &rep.note {
                bytes.extend_from_slice(format!("# {note}\n").as_bytes());
            }
            bytes.extend(rep.to_csv(&format!("a_{}", la.algorithm), &format!("b_{}", lb.algorithm))?);
            fs::write(&out, bytes)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenMdp(a) => gen_mdp(a),
        Command::GenDataset(a) => gen_dataset(a),
        Command::Train(a) => train_cmd(a),
        Command::VerifyTheory(a) => verify_theory(a),
        Command::Run(a) => run(a),
        Command::Report(r) => report(r),
    }
}
