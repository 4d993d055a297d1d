//! Fast consistency checks that need no configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sigfl::attacks::{fgsm, pgd};
use sigfl::config::parse_config;
use sigfl::defense::wasserstein1;
use sigfl::experiment::run_experiment;
use sigfl::neural::{input_gradient, loss_and_grads, ArchSpec, ModelParams};
use sigfl::results::rounds_csv;
use sigfl::sigsyn::SignalSample;

const TINY: &str = r#"{"dataset": {"per_class": 20, "length": 16, "schemes": ["BPSK", "QPSK", "PAM4", "QAM16"]},
    "devices": 4, "rounds": 3, "t0": 1, "model": {"hidden": [8]}, "training": {"lr": 0.05},
    "attack": {"kind": "pgd", "pgd_iters": 3}, "reserve": {"size": 20}}"#;

type Check = fn() -> Result<String, String>;

pub fn run() -> Result<(), String> {
    let checks: [(&str, Check); 4] = [
        ("wasserstein", wasserstein),
        ("gradients", gradients),
        ("pgd-fgsm", pgd_matches_fgsm),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(msg) => println!("{name}: ok ({msg})"),
            Err(msg) => {
                println!("{name}: FAILED ({msg})");
                failed += 1;
            }
        }
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(format!("{failed} self-test check(s) failed"))
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let params = ModelParams::zeros(ArchSpec::mlp(6, vec![5], 3));
    let values = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    params.with_values(values).expect("matching length")
}

fn random_sample(rng: &mut ChaCha8Rng) -> SignalSample {
    SignalSample {
        iq: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        label: rng.random_range(0..3),
        snr_db: 10.0,
    }
}

fn wasserstein() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let p: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let brute = perms
            .iter()
            .map(|pi| (0..3).map(|i| (p[i] - q[pi[i]]).abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let fast = wasserstein1(&p, &q).map_err(|e| e.to_string())?;
        if (fast - brute).abs() > 1e-9 {
            return Err(format!("W1 {fast} vs brute force {brute}"));
        }
    }
    Ok("200 cases".into())
}

fn gradients() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let params = random_model(&mut rng);
    let s = random_sample(&mut rng);
    let loss = |p: &ModelParams, s: &SignalSample| loss_and_grads(p, [s]).map(|g| g.loss).map_err(|e| e.to_string());
    let analytic = loss_and_grads(&params, [&s])
        .map_err(|e| e.to_string())?
        .param_grads
        .flatten();
    let flat = params.flatten();
    let mut worst: f64 = 0.0;
    for (j, a) in analytic.iter().enumerate() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[j] += h;
        minus[j] -= h;
        let n = (loss(&params.with_values(plus).map_err(|e| e.to_string())?, &s)?
            - loss(&params.with_values(minus).map_err(|e| e.to_string())?, &s)?)
            / (2.0 * h);
        worst = worst.max((a - n).abs());
    }
    let input = input_gradient(&params, &s.iq, s.label).map_err(|e| e.to_string())?;
    for (j, a) in input.iter().enumerate() {
        let mut plus = s.clone();
        let mut minus = s.clone();
        plus.iq[j] += h;
        minus.iq[j] -= h;
        let n = (loss(&params, &plus)? - loss(&params, &minus)?) / (2.0 * h);
        worst = worst.max((a - n).abs());
    }
    if worst < 1e-6 {
        Ok(format!("max abs error {worst:.1e}"))
    } else {
        Err(format!("finite differences disagree by {worst:.1e}"))
    }
}

fn pgd_matches_fgsm() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = random_model(&mut rng);
    let s = random_sample(&mut rng);
    let a = pgd(&params, &s, 0.5, 1).map_err(|e| e.to_string())?;
    let b = fgsm(&params, &s, 0.5).map_err(|e| e.to_string())?;
    if a == b {
        Ok("bitwise equal".into())
    } else {
        Err("single-step PGD differs from FGSM".into())
    }
}

fn determinism() -> Result<String, String> {
    let cfg = parse_config(TINY).map_err(|e| e.to_string())?;
    let a = rounds_csv(&run_experiment(&cfg).map_err(|e| e.to_string())?);
    let b = rounds_csv(&run_experiment(&cfg).map_err(|e| e.to_string())?);
    if a == b {
        Ok(format!("{} bytes of rounds.csv identical", a.len()))
    } else {
        Err("repeated run produced a different rounds.csv".into())
    }
}
