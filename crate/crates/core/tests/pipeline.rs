use std::fs;

use parlab::datagen::Regime;
use parlab::harness::experiment::{benchmark_learner_config, run_experiment, AlgorithmSpec, ExperimentConfig, MdpSpec};
use parlab::harness::report::{report_uncertainty, report_weights};
use parlab::harness::tasks::Task;
use parlab::learners::{Algorithm, TrainLog};
use sha2::{Digest, Sha256};

fn small_sweep(task: Task, regime: Regime) -> ExperimentConfig {
    let mut c = ExperimentConfig::default_benchmark();
    c.name = "pipeline".into();
    c.mdps = vec![MdpSpec::builtin(task)];
    c.regimes = vec![regime];
    c.seeds = vec![0];
    c.workers = Some(1);
    c.algorithms = [Algorithm::Spacql, Algorithm::JointCql]
        .into_iter()
        .map(|algorithm| AlgorithmSpec {
            algorithm,
            config: benchmark_learner_config(),
        })
        .collect();
    c
}

#[test]
fn random_regime_weights_and_uncertainty_trends() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&small_sweep(Task::Meeting, Regime::Random), Some(dir.path())).unwrap();
    let log_of = |a: Algorithm| {
        let i = out.runs.iter().position(|r| r.algorithm == a).unwrap();
        out.results[i].as_ref().unwrap().log.clone()
    };
    let (sp, jc) = (log_of(Algorithm::Spacql), log_of(Algorithm::JointCql));

    let series = report_weights(std::slice::from_ref(&sp)).unwrap();
    let n = series[0].len();
    for ws in &series[0] {
        assert!(ws.normalized.iter().all(|x| (0.0..=1.0).contains(x)));
    }
    let mean = |k: usize| series[0][k].raw.iter().sum::<f64>() / series[0][k].raw.len() as f64;
    assert!(mean(0) > mean(n - 1));

    let u = report_uncertainty(&jc, &sp).unwrap();
    assert!(u.a.iter().chain(&u.b).all(|x| *x >= 0.0));
    assert!(u.a.last().unwrap() >= u.b.last().unwrap());
}

#[test]
fn outputs_carry_verifiable_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_sweep(Task::PenaltyGame, Regime::Medium);
    for a in &mut config.algorithms {
        a.config.steps = 50;
    }
    let out = run_experiment(&config, Some(dir.path())).unwrap();
    let config_hash = hex::encode(Sha256::digest(serde_json::to_string(&config).unwrap()));
    assert_eq!(out.config_hash, config_hash);
    let mdp_hash = Task::PenaltyGame.build().content_hash();

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let hashes = manifest["output_hashes"].as_object().unwrap();
    assert_eq!(hashes.len(), 4);
    for (name, h) in hashes {
        let bytes = fs::read(dir.path().join(name)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), h.as_str().unwrap(), "{name}");
        let first = String::from_utf8_lossy(&bytes).lines().next().unwrap().to_string();
        assert!(first.contains(&config_hash) && first.contains(&mdp_hash), "{name}");
    }

    for r in &out.runs {
        let run_dir = dir.path().join("runs").join(r.dir_name());
        let text = fs::read_to_string(run_dir.join("trainlog.jsonl")).unwrap();
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header["config_hash"], config_hash.as_str());
        assert_eq!(header["mdp_hash"], mdp_hash.as_str());
        let log = TrainLog::read_jsonl(run_dir.join("trainlog.jsonl")).unwrap();
        assert_eq!(log.steps.len(), 50);
        let fin = fs::read_to_string(run_dir.join("final.json")).unwrap();
        assert!(fin.contains(&config_hash) && fin.contains(&mdp_hash));
    }
}

fn dataset(m: &parlab::decmdp::DecMdp, regime: Regime, size: usize, seed: u64) -> (parlab::datagen::Behavior, parlab::datagen::TransitionDataset) {
    use parlab::datagen::{make_behavior, sample_dataset, BehaviorSpec, SamplingMode};
    let spec = BehaviorSpec::new(regime, seed);
    let b = make_behavior(m, &spec).unwrap();
    let ds = sample_dataset(m, &b, &spec, size, SamplingMode::Trajectory, seed).unwrap();
    (b, ds)
}

#[test]
fn single_deviation_weight_dominates_late_in_training() {
    use parlab::learners::{train_spacql, LearnerConfig};
    let m = Task::Meeting.build();
    let (_, ds) = dataset(&m, Regime::Random, 200, 0);
    let r = train_spacql(&ds, m.gamma, &LearnerConfig::default(), Some(&m)).unwrap();
    let n = r.log.steps.len();
    let w = r.log.mean_weights(n - n / 10, n);
    assert!(w[0] > w[1], "{w:?}");
}

#[test]
fn joint_cql_on_expert_data_matches_behavior() {
    use parlab::decmdp::policy_value;
    use parlab::learners::{evaluate_learned, train_joint_cql_baseline, EvalMode, LearnerConfig};
    use parlab::policies::product_policy;
    use parlab::random::{random_mdp, stream_rng, InstanceShape};
    for s in 0..3 {
        let m = random_mdp(&InstanceShape::new(3, vec![2, 2], 0.9), &mut stream_rng(s, &[9]));
        let (b, ds) = dataset(&m, Regime::Expert, 500, s);
        let behavior = policy_value(&m, &product_policy(b.marginals())).unwrap();
        let r = train_joint_cql_baseline(&ds, m.gamma, &LearnerConfig { seed: s, ..LearnerConfig::default() }, Some(&m)).unwrap();
        let v = evaluate_learned(&m, &r.policy.policy(), EvalMode::Greedy).unwrap().value;
        assert!(v >= behavior - 1e-9, "{v} < {behavior}");
    }
}
