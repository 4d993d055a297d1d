//! End-to-end runs on a small scenario: persisted files, invariants of the
//! results bundle and knowledge-mode isolation.

use std::fs;

use sigfl::config::{parse_config, ExperimentConfig, Knowledge};
use sigfl::defense::DefenseKind;
use sigfl::experiment::run_experiment;
use sigfl::results::{read_summary, write_results};

fn small() -> ExperimentConfig {
    parse_config(
        r#"{"dataset": {"per_class": 30, "length": 16, "schemes": ["BPSK", "QPSK", "PAM4", "QAM16"]},
            "devices": 5, "rounds": 6, "t0": 2, "model": {"hidden": [8]},
            "training": {"lr": 0.1, "batch_size": 8}, "attack": {"kind": "pgd", "pgd_iters": 3},
            "reserve": {"size": 24}, "seeds": [4, 5]}"#,
    )
    .unwrap()
}

#[test]
fn files_round_trip_and_bundle_invariants_hold() {
    let cfg = small();
    let bundle = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_results(&bundle, dir.path()).unwrap();

    let summary = read_summary(&dir.path().join("summary.json")).unwrap();
    assert_eq!(summary, bundle.summary());
    assert_eq!(summary.final_accuracy, bundle.final_accuracy());
    assert_eq!(summary.n_runs, 2);

    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + cfg.rounds * 2);

    // confusion totals equal the test-set size of each seed
    let confusion = fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    for run in &bundle.runs {
        let total: usize = confusion
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{},", run.seed)))
            .flat_map(|l| {
                l.split(',')
                    .skip(2)
                    .map(|v| v.parse::<usize>().unwrap())
                    .collect::<Vec<_>>()
            })
            .sum();
        let expected: usize = run.confusion.iter().flatten().sum();
        assert_eq!(total, expected);
        assert_eq!(
            expected,
            (cfg.dataset.total() as f64 * cfg.dataset.test_fraction).round() as usize
        );
        assert!((0.0..=100.0).contains(&run.fp.rate));
    }
}

#[test]
fn knowledge_mode_leaves_usdfl_untouched() {
    let mut reference = None;
    for k in [
        Knowledge::All,
        Knowledge::Adversaries,
        Knowledge::AttackTime,
        Knowledge::Nothing,
    ] {
        let mut cfg = small();
        cfg.defense.kind = DefenseKind::Usdfl;
        cfg.knowledge = k;
        let bundle = run_experiment(&cfg).unwrap();
        let params: Vec<Vec<f64>> = bundle.runs.iter().map(|r| r.final_params.flatten()).collect();
        match &reference {
            None => reference = Some(params),
            Some(r) => assert_eq!(r, &params, "{k:?}"),
        }
    }
}

#[test]
fn knowledge_mode_reaches_the_baselines() {
    let run = |k: Knowledge| {
        let mut cfg = small();
        cfg.defense.kind = DefenseKind::Trimmed;
        cfg.knowledge = k;
        run_experiment(&cfg).unwrap().runs[0].records.clone()
    };
    let all = run(Knowledge::All);
    let nothing = run(Knowledge::Nothing);
    // with no timing knowledge the baseline is active from round 0
    assert!(all[0].perceived.is_empty());
    assert!(!nothing[0].perceived.is_empty());
}
