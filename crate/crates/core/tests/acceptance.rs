//! Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero on any failure.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use parlab::datagen::Regime;
use parlab::harness::experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
use parlab::harness::tasks::Task;
use parlab::harness::verify::{run_suite, Suite};
use parlab::learners::{Algorithm, TrainResult};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn suite(id: &'static str, s: Suite, limit: Option<Duration>) -> Outcome {
    let t = Instant::now();
    let r = run_suite(s, s.default_instances(), 0);
    let elapsed = t.elapsed();
    match r {
        Ok(r) => {
            let m = r.summary;
            let in_time = limit.is_none_or(|l| elapsed <= l);
            let stats: Vec<String> = m.stats.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect();
            Outcome {
                id,
                pass: m.passed && in_time,
                detail: format!(
                    "{} checks, {} violations, min slack {}, {:.2}s {}",
                    m.checks,
                    m.violations,
                    m.min_slack.map_or("-".into(), |x| format!("{x:.3e}")),
                    elapsed.as_secs_f64(),
                    stats.join(" ")
                ),
            }
        }
        Err(e) => Outcome {
            id,
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs of one (task, regime, algorithm) cell in seed order.
fn cell(out: &ExperimentOutcome, task: Task, regime: Regime, algo: Algorithm) -> Vec<&TrainResult> {
    let mut v: Vec<(u64, &TrainResult)> = out
        .runs
        .iter()
        .zip(&out.results)
        .filter(|(r, _)| r.mdp == task.name() && r.regime == regime && r.algorithm == algo)
        .filter_map(|(r, res)| res.as_ref().map(|res| (r.seed, res)))
        .collect();
    v.sort_by_key(|(s, _)| *s);
    v.into_iter().map(|(_, r)| r).collect()
}

fn table_trend(out: &ExperimentOutcome) -> Outcome {
    let mut wins = 0;
    let mut cells = 0;
    let mut detail = Vec::new();
    for task in Task::ALL {
        for regime in [Regime::Random, Regime::MediumReplay] {
            let score = |a| out.table.row(task.name(), regime, a).and_then(|r| r.score_mean);
            let (sp, jc) = (score(Algorithm::Spacql), score(Algorithm::JointCql));
            cells += 1;
            if let (Some(sp), Some(jc)) = (sp, jc) {
                if sp >= jc {
                    wins += 1;
                }
                detail.push(format!("{task}/{regime} {sp:.1} vs {jc:.1}"));
            }
        }
    }
    Outcome {
        id: "8 score trend",
        pass: wins as f64 >= 0.7 * cells as f64,
        detail: format!("{wins}/{cells} cells [{}]", detail.join(", ")),
    }
}

fn uncertainty(out: &ExperimentOutcome) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for task in Task::ALL {
        let sp = cell(out, task, Regime::Random, Algorithm::Spacql);
        let jc = cell(out, task, Regime::Random, Algorithm::JointCql);
        let last = |r: &TrainResult| r.log.steps.last().map_or(f64::NAN, |s| s.target_std);
        let ok = sp.iter().zip(&jc).filter(|(a, b)| last(a) <= last(b)).count();
        pass &= sp.len() == 5 && jc.len() == 5 && ok >= 4;
        detail.push(format!("{task} {ok}/5"));
    }
    Outcome {
        id: "9 ensemble std",
        pass,
        detail: detail.join(", "),
    }
}

fn weights(out: &ExperimentOutcome) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for task in Task::ALL {
        let mean_w = |r: &TrainResult| r.log.mean_weights(0, r.log.steps.len());
        let random = cell(out, task, Regime::Random, Algorithm::Spacql);
        let expert = cell(out, task, Regime::Expert, Algorithm::Spacql);
        let ordered = random
            .iter()
            .filter(|r| {
                let w = mean_w(r);
                w[0] > w[w.len() - 1]
            })
            .count();
        let coordinated = |rs: &[&TrainResult]| {
            rs.iter().map(|r| mean_w(r)[1..].iter().sum::<f64>()).sum::<f64>() / rs.len().max(1) as f64
        };
        let (ce, cr) = (coordinated(&expert), coordinated(&random));
        pass &= random.len() == 5 && ordered >= 4 && ce > cr;
        detail.push(format!("{task} w1>wn {ordered}/5, expert {ce:.3} vs random {cr:.3}"));
    }
    Outcome {
        id: "10 weight trends",
        pass,
        detail: detail.join(", "),
    }
}

fn range_discipline(out: &ExperimentOutcome) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut steps = 0usize;
    for res in out.results.iter().flatten() {
        for s in &res.log.steps {
            steps += 1;
            worst = worst.max(s.max_range);
        }
    }
    // Every task shares the discount.
    let limit = 2.0 / (1.0 - parlab::harness::tasks::TASK_GAMMA) + 1e-12;
    let complete = out.results.iter().all(Option::is_some);
    Outcome {
        id: "12 range discipline",
        pass: complete && steps > 0 && worst <= limit,
        detail: format!("max range {worst:.4} over {steps} steps, limit {limit}"),
    }
}

fn main() {
    let mut outcomes = vec![
        suite("1 lemma 1 suite", Suite::Lemma1, Some(Duration::from_secs(60))),
        suite("2 lemma 2 suite", Suite::Lemma2, None),
        suite("3 product difference", Suite::ProductDifference, None),
        suite("4 contraction", Suite::Contraction, None),
        suite("5 value-error bounds", Suite::Bounds, None),
        suite("6 gradient equivalence", Suite::Gradients, None),
        suite("7 monte carlo backup", Suite::MonteCarlo, None),
    ];

    let config = ExperimentConfig::default_benchmark();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let t = Instant::now();
    let first = run_experiment(&config, Some(a.path()));
    let first_time = t.elapsed();
    match first {
        Ok(first) => {
            outcomes.push(table_trend(&first));
            outcomes.push(uncertainty(&first));
            outcomes.push(weights(&first));
            let t = Instant::now();
            let second = run_experiment(&config, Some(b.path()));
            let second_time = t.elapsed();
            let budget = Duration::from_secs(600);
            let (pass, detail) = match second {
                Ok(second) => {
                    let mut same = first.output_hashes == second.output_hashes;
                    let mut files = BTreeMap::new();
                    for name in first.output_hashes.keys() {
                        let x = std::fs::read(a.path().join(name)).unwrap_or_default();
                        let y = std::fs::read(b.path().join(name)).unwrap_or_else(|_| vec![1]);
                        files.insert(name.clone(), x == y);
                        same &= x == y;
                    }
                    (
                        same && first_time <= budget && second_time <= budget,
                        format!(
                            "{} CSVs identical: {same}, runs {:.1}s and {:.1}s",
                            files.len(),
                            first_time.as_secs_f64(),
                            second_time.as_secs_f64()
                        ),
                    )
                }
                Err(e) => (false, format!("rerun error: {e}")),
            };
            outcomes.push(Outcome {
                id: "11 determinism and budget",
                pass,
                detail,
            });
            outcomes.push(range_discipline(&first));
        }
        Err(e) => {
            for id in ["8 score trend", "9 ensemble std", "10 weight trends", "11 determinism and budget", "12 range discipline"] {
                outcomes.push(Outcome {
                    id,
                    pass: false,
                    detail: format!("benchmark error: {e}"),
                });
            }
        }
    }

    let mut failed = 0;
    for o in &outcomes {
        println!("{} criterion {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
