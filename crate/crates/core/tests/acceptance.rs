//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! a summary.
//!
//! Failed criteria are reported but do not fail `cargo test` unless
//! `SIGFL_ACCEPTANCE_STRICT=1` is set. Positional arguments select a subset of
//! criteria by number, e.g. `cargo test --test acceptance -- 1 3 7`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sigfl::attacks::{fgsm, pgd, AttackKind};
use sigfl::config::{parse_config, ExperimentConfig, FilterPolicy, Knowledge};
use sigfl::defense::{fedavg, filtered_aggregate, usdfl_aggregate, wasserstein1, weighted_mean, DefenseKind};
use sigfl::experiment::{initial_model, prepare_data, run_experiment, sim_params, ResultsBundle};
use sigfl::fedsim::{simulate, NetworkState};
use sigfl::metrics::fp_rate;
use sigfl::neural::{init_model, input_gradient, loss_and_grads, ArchSpec, Init, ModelParams};
use sigfl::results::rounds_csv;
use sigfl::sigsyn::SignalSample;
use sigfl::theory::{check_lemma_gap, run_theory, Objective, Quadratic};

const DESK: &str = include_str!("../../../configs/desk_pgd.json");

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Desk runs shared between criteria, keyed by a scenario label.
#[derive(Default)]
struct Runs {
    cache: HashMap<String, ResultsBundle>,
}

impl Runs {
    fn get(&mut self, label: &str, cfg: impl FnOnce() -> ExperimentConfig) -> &ResultsBundle {
        self.cache.entry(label.to_string()).or_insert_with(|| {
            let cfg = cfg();
            run_experiment(&cfg).unwrap_or_else(|e| panic!("scenario {label}: {e}"))
        })
    }
}

fn desk() -> ExperimentConfig {
    let mut cfg = parse_config(DESK).expect("desk config parses");
    cfg.twin = false;
    cfg
}

fn scenario(attack: AttackKind, defense: DefenseKind) -> ExperimentConfig {
    let mut cfg = desk();
    cfg.attack.kind = attack;
    cfg.defense.kind = defense;
    cfg
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn c1(_: &mut Runs) -> Outcome {
    let mut r = rng(101);
    let perms: Vec<Vec<Vec<usize>>> = (0..=6).map(permutations).collect();
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = r.random_range(1..=6);
        // every fourth case uses small integers so ties occur
        let draw = |r: &mut ChaCha8Rng| {
            if case % 4 == 0 {
                r.random_range(-3i32..=3) as f64
            } else {
                r.random_range(-10.0..10.0)
            }
        };
        let p: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let q: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let brute = perms[n]
            .iter()
            .map(|pi| p.iter().zip(pi).map(|(a, &j)| (a - q[j]).abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let fast = wasserstein1(&p, &q).unwrap();
        worst = worst.max((fast - brute).abs());
    }
    Outcome::new(
        worst <= 1e-9,
        format!("1000 arrays, max |sorted - brute| = {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 2

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn single_loss(params: &ModelParams, s: &SignalSample) -> f64 {
    loss_and_grads(params, [s]).unwrap().loss
}

fn c2(_: &mut Runs) -> Outcome {
    let h = 1e-4;
    let mut r = rng(202);
    let mut worst_param: f64 = 0.0;
    let mut worst_input: f64 = 0.0;
    for _ in 0..100 {
        let length = r.random_range(2..=12);
        let depth = r.random_range(0..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(3..=10)).collect();
        let classes = r.random_range(2..=6);
        // random biases too: zero biases put ReLUs of dead layers exactly on the kink
        let params = ModelParams::zeros(ArchSpec::mlp(length, hidden, classes));
        let values = (0..params.len())
            .map(|_| 0.5 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let params = params.with_values(values).unwrap();
        let sample = SignalSample {
            iq: (0..2 * length).map(|_| r.sample(StandardNormal)).collect(),
            label: r.random_range(0..classes),
            snr_db: 10.0,
        };

        let analytic = loss_and_grads(&params, [&sample]).unwrap().param_grads.flatten();
        let flat = params.flatten();
        let numeric: Vec<f64> = (0..flat.len())
            .map(|j| {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[j] += h;
                minus[j] -= h;
                let lp = single_loss(&params.with_values(plus).unwrap(), &sample);
                let lm = single_loss(&params.with_values(minus).unwrap(), &sample);
                (lp - lm) / (2.0 * h)
            })
            .collect();
        worst_param = worst_param.max(rel_err(&analytic, &numeric));

        let analytic = input_gradient(&params, &sample.iq, sample.label).unwrap();
        let numeric: Vec<f64> = (0..sample.iq.len())
            .map(|j| {
                let mut plus = sample.clone();
                let mut minus = sample.clone();
                plus.iq[j] += h;
                minus.iq[j] -= h;
                (single_loss(&params, &plus) - single_loss(&params, &minus)) / (2.0 * h)
            })
            .collect();
        worst_input = worst_input.max(rel_err(&analytic, &numeric));
    }
    Outcome::new(
        worst_param < 1e-4 && worst_input < 1e-4,
        format!("100 fixtures, max rel err params {worst_param:.2e}, input {worst_input:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_models(r: &mut ChaCha8Rng, k: usize) -> Vec<ModelParams> {
    let arch = ArchSpec::mlp(8, vec![6], 4);
    (0..k).map(|_| init_model(arch.clone(), Init::He, r).unwrap()).collect()
}

fn dusdfl_matches_usdfl() -> f64 {
    let mut cfg = desk();
    cfg.dataset.per_class = 100;
    cfg.rounds = 10;
    cfg.t0 = 2;
    cfg.defense.calibrate_b_rounds = Some(2);
    let seed = 1;
    let trajectory = |kind: DefenseKind| {
        let mut cfg = cfg.clone();
        cfg.defense.kind = kind;
        let data = prepare_data(&cfg, seed).unwrap();
        let mut sim = sim_params(&cfg, seed);
        sim.keep_params = true;
        let global = initial_model(&cfg, seed).unwrap();
        let mut state =
            NetworkState::new(data.shards, &data.adversary, data.reserve, data.spare, global, &sim).unwrap();
        simulate(&mut state, &sim, cfg.rounds, Some(&data.test)).unwrap()
    };
    let a = trajectory(DefenseKind::Usdfl);
    let b = trajectory(DefenseKind::Dusdfl);
    assert_eq!(a.len(), 10);
    a.iter()
        .zip(&b)
        .map(|(x, y)| {
            let (x, y) = (x.aggregate.as_ref().unwrap(), y.aggregate.as_ref().unwrap());
            max_abs_diff(x.as_slice(), y.as_slice())
        })
        .fold(0.0, f64::max)
}

fn c3(_: &mut Runs) -> Outcome {
    let mut r = rng(303);
    let (mut da, mut db, mut dc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let k = r.random_range(1..=10);
        let params = random_models(&mut r, k);
        let sizes: Vec<usize> = (0..k).map(|_| r.random_range(1..=500)).collect();
        let total: usize = sizes.iter().sum();
        let oracle: Vec<f64> = (0..params[0].len())
            .map(|j| {
                params
                    .iter()
                    .zip(&sizes)
                    .map(|(p, &d)| d as f64 / total as f64 * p.as_slice()[j])
                    .sum()
            })
            .collect();

        let scaled = fedavg(&params, &sizes, &vec![1.0; k]).unwrap();
        da = da.max(max_abs_diff(scaled.as_slice(), &oracle));

        let accs: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
        let none_filtered = usdfl_aggregate(&params, &sizes, &accs, 0.1).unwrap();
        assert!(none_filtered.perceived.is_empty());
        let plain = weighted_mean(&params, &sizes).unwrap();
        db = db.max(max_abs_diff(none_filtered.aggregate.as_slice(), plain.as_slice()));
        db = db.max(max_abs_diff(none_filtered.aggregate.as_slice(), &oracle));
        let personal = filtered_aggregate(&params, &sizes, &accs, &vec![0.0; k]).unwrap();
        db = db.max(max_abs_diff(personal.aggregate.as_slice(), scaled.as_slice()));

        let sample = SignalSample {
            iq: (0..16).map(|_| r.sample(StandardNormal)).collect(),
            label: r.random_range(0..4),
            snr_db: 8.0,
        };
        let power = r.random_range(0.01..2.0);
        match (pgd(&params[0], &sample, power, 1), fgsm(&params[0], &sample, power)) {
            (Ok(single), Ok(step)) => dc = dc.max(max_abs_diff(&single.delta, &step.delta)),
            // a dead network has no input gradient: both must refuse
            (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
            _ => dc = f64::INFINITY,
        }
    }
    let dd = dusdfl_matches_usdfl();
    let pass = [da, db, dc, dd].iter().all(|d| *d <= 1e-12);
    Outcome::new(
        pass,
        format!("max coord diff: (a) {da:.1e} (b) {db:.1e} (c) {dc:.1e} (d) {dd:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

const ATTACKS: [AttackKind; 5] = [
    AttackKind::None,
    AttackKind::Flip,
    AttackKind::Awgn,
    AttackKind::Fgsm,
    AttackKind::Pgd,
];

fn c4(runs: &mut Runs) -> Outcome {
    let acc: Vec<f64> = ATTACKS
        .iter()
        .map(|&a| {
            runs.get(&format!("{a}/none"), || scenario(a, DefenseKind::None))
                .post_t0_accuracy()
        })
        .collect();
    let [unperturbed, flip, awgn, fgsm_acc, pgd_acc] = acc[..] else {
        unreachable!()
    };
    let ordered = unperturbed > flip && flip >= awgn && awgn >= fgsm_acc && fgsm_acc >= pgd_acc;
    let gap = unperturbed - pgd_acc;
    let detail = ATTACKS
        .iter()
        .zip(&acc)
        .map(|(a, v)| format!("{a} {}", pct(*v)))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(
        ordered && gap >= 0.10,
        format!(
            "post-t0 accuracy {detail}; ordered {ordered}, gap {:.2} pts",
            100.0 * gap
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

fn usdfl_with_twin(runs: &mut Runs) -> &ResultsBundle {
    runs.get("pgd/usdfl+twin", || {
        let mut cfg = scenario(AttackKind::Pgd, DefenseKind::Usdfl);
        cfg.twin = true;
        cfg
    })
}

const BASELINES: [DefenseKind; 3] = [DefenseKind::None, DefenseKind::Median, DefenseKind::Trimmed];

fn c5(runs: &mut Runs) -> Outcome {
    let (usdfl, twin) = {
        let b = usdfl_with_twin(runs);
        (b.final_accuracy(), b.summary().twin_final_accuracy.unwrap())
    };
    let others: Vec<f64> = BASELINES
        .iter()
        .map(|&d| {
            runs.get(&format!("pgd/{d}"), || scenario(AttackKind::Pgd, d))
                .final_accuracy()
        })
        .collect();
    let near_twin = usdfl >= twin - 0.05;
    let above = others.iter().all(|o| usdfl > *o);
    Outcome::new(
        near_twin && above,
        format!(
            "final accuracy usdfl {}, twin {}, none {}, median {}, trimmed {}",
            pct(usdfl),
            pct(twin),
            pct(others[0]),
            pct(others[1]),
            pct(others[2])
        ),
    )
}

fn c6(runs: &mut Runs) -> Outcome {
    let usdfl = usdfl_with_twin(runs).fp_rate();
    let median = runs
        .get("pgd/median", || scenario(AttackKind::Pgd, DefenseKind::Median))
        .fp_rate();
    let trimmed = runs
        .get("pgd/trimmed", || scenario(AttackKind::Pgd, DefenseKind::Trimmed))
        .fp_rate();
    let table = fp_rate(2.41, 7.0);
    let table_ok = (table - 34.4).abs() < 0.05;
    Outcome::new(
        usdfl <= 2.0 && median > usdfl && trimmed > usdfl && table_ok,
        format!("fp rate usdfl {usdfl:.2}%, median {median:.2}%, trimmed {trimmed:.2}%; 2.41/7 -> {table:.2}%"),
    )
}

// ---------------------------------------------------------------- 7

fn c7(_: &mut Runs) -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.theory.rounds = 50;
    let report = run_theory(&cfg, 1).expect("theory run");
    let lemma_ok = report.lemma_pass_rate == 1.0;
    let theorem = report.theorem_pass_rate.unwrap_or(0.0);
    let scaling = &report.error_scaling;

    // no device excluded: every gap must vanish exactly
    let mut clean = cfg.clone();
    clean.theory.filtered = 0;
    clean.theory.policy = FilterPolicy::Fixed;
    clean.theory.rounds = 10;
    let clean = run_theory(&clean, 1).expect("unfiltered theory run");
    let zero_ok = clean
        .records
        .iter()
        .all(|r| r.zeta_norm == 0.0 && r.lemma_lhs == 0.0 && r.lemma_rhs == 0.0 && r.lemma_holds);

    let mut r = rng(707);
    let mut quad_gap: f64 = 0.0;
    for _ in 0..200 {
        let dim = r.random_range(1..=20);
        let q = Quadratic {
            dim,
            curvature: r.random_range(0.1..5.0),
        };
        let w: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let zeta: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let w_hat: Vec<f64> = w.iter().zip(&zeta).map(|(a, b)| a + b).collect();
        let c = check_lemma_gap(
            q.loss(&w_hat).unwrap(),
            q.loss(&w).unwrap(),
            &zeta,
            &q.grad(&w).unwrap(),
            q.curvature,
        );
        quad_gap = quad_gap.max((c.lhs - c.rhs).abs() / c.lhs.abs().max(1.0));
    }
    let quad_ok = quad_gap <= 1e-12;

    Outcome::new(
        lemma_ok && zero_ok && quad_ok && theorem >= 0.99 && scaling.within_tolerance,
        format!(
            "lemma {:.0}% of {} rounds, zero-gap exact {zero_ok}, quadratic equality {quad_gap:.1e}, \
             theorem {:.0}%, median |e| ratio {:.3} (D={} vs {})",
            100.0 * report.lemma_pass_rate,
            report.records.len(),
            100.0 * theorem,
            scaling.ratio,
            scaling.base_size,
            scaling.scaled_size
        ),
    )
}

// ---------------------------------------------------------------- 8

const MODES: [Knowledge; 4] = [
    Knowledge::All,
    Knowledge::Adversaries,
    Knowledge::AttackTime,
    Knowledge::Nothing,
];

fn with_knowledge(defense: DefenseKind, k: Knowledge) -> ExperimentConfig {
    let mut cfg = scenario(AttackKind::Pgd, defense);
    cfg.knowledge = k;
    cfg
}

fn c8(runs: &mut Runs) -> Outcome {
    let reference: Vec<f64> = usdfl_with_twin(runs).runs.iter().map(|r| r.final_accuracy).collect();
    let mut identical = true;
    for k in MODES {
        let per_seed: Vec<f64> = runs
            .get(&format!("pgd/usdfl/{}", k.name()), || {
                with_knowledge(DefenseKind::Usdfl, k)
            })
            .runs
            .iter()
            .map(|r| r.final_accuracy)
            .collect();
        identical &= per_seed == reference;
    }
    let mut drops = Vec::new();
    for d in [DefenseKind::UnionM, DefenseKind::UnionT] {
        let all = runs
            .get(&format!("pgd/{d}/all"), || with_knowledge(d, Knowledge::All))
            .final_accuracy();
        let nothing = runs
            .get(&format!("pgd/{d}/nothing"), || with_knowledge(d, Knowledge::Nothing))
            .final_accuracy();
        drops.push((d, all, nothing));
    }
    let degrade = drops.iter().all(|(_, all, nothing)| all - nothing >= 0.03);
    let detail = drops
        .iter()
        .map(|(d, all, nothing)| format!("{d} {} -> {}", pct(*all), pct(*nothing)))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(
        identical && degrade,
        format!("usdfl identical across modes {identical}; {detail}"),
    )
}

// ---------------------------------------------------------------- 9

fn c9(_: &mut Runs) -> Outcome {
    let mut cfg = scenario(AttackKind::Pgd, DefenseKind::Usdfl);
    cfg.seeds = Some(vec![1]);
    let csv_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| rounds_csv(&run_experiment(&cfg).unwrap()))
    };
    let a = csv_with(1);
    let b = csv_with(2);
    Outcome::new(
        a == b,
        format!("rounds.csv {} bytes, 1 vs 2 threads identical {}", a.len(), a == b),
    )
}

// ----------------------------------------------------------------

type Criterion = fn(&mut Runs) -> Outcome;

fn main() {
    let criteria: [(&str, Criterion, Duration); 9] = [
        ("wasserstein oracle", c1, Duration::from_secs(5)),
        ("gradient correctness", c2, Duration::from_secs(30)),
        ("reduction identities", c3, Duration::MAX),
        ("attack ordering", c4, Duration::from_secs(600)),
        ("defense efficacy", c5, Duration::from_secs(900)),
        ("false positives", c6, Duration::MAX),
        ("theory checks", c7, Duration::from_secs(300)),
        ("limited knowledge", c8, Duration::MAX),
        ("determinism", c9, Duration::MAX),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("SIGFL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut runs = Runs::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = check(&mut runs);
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let pass = out.pass && in_time;
        let budget = if *limit == Duration::MAX {
            String::new()
        } else {
            format!(" (limit {}s)", limit.as_secs())
        };
        println!(
            "criterion {n} [{name}]: {} | {} | {:.1}s{budget}",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(n);
        }
    }
    println!("acceptance: {}/{ran} passed, failed {failed:?}", ran - failed.len());
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
