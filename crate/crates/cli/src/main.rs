//! `sigfl` command-line driver.
//!
//! Exit codes: 0 on success, 2 for invalid input (bad flags, unreadable or
//! inconsistent configuration), 3 for failures during a run, including
//! failed theory or self-test checks.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use sigfl::config::{parse_config, ExperimentConfig};
use sigfl::experiment::run_experiment;
use sigfl::results::{write_atomic, write_results, write_theory_report};
use sigfl::sweep::{parse_sweep, sweep};
use sigfl::theory::{run_theory, TheoryReport};

mod selftest;

#[derive(Parser)]
#[command(
    name = "sigfl",
    version,
    about = "Adversarial federated signal classification simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (every configured seed) and write its result files.
    Run(Common),
    /// Run the Cartesian product of a sweep specification.
    Sweep(Common),
    /// Run the convergence checks on the convex surrogate.
    VerifyTheory(Common),
    /// Quick built-in consistency checks.
    Selftest {
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration (a sweep specification for `sweep`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<sigfl::Error> for Failure {
    fn from(e: sigfl::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::Run(c) | Command::Sweep(c) | Command::VerifyTheory(c) => c.threads,
        Command::Selftest { threads } => *threads,
    };
    let result = set_threads(threads).and_then(|()| match cli.command {
        Command::Run(c) => run(&c),
        Command::Sweep(c) => run_sweep(&c),
        Command::VerifyTheory(c) => verify_theory(&c),
        Command::Selftest { .. } => selftest::run().map_err(Failure::Runtime),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn set_threads(threads: Option<usize>) -> Outcome {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Failure::Validation("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => parse_config(&read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.seeds = Some(vec![seed]);
    }
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg_dir: Option<&Path>, fallback: &str) -> PathBuf {
    c.out
        .clone()
        .or_else(|| cfg_dir.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn run(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let dir = out_dir(c, cfg.output_dir.as_deref(), "sigfl-out");
    let bundle = run_experiment(&cfg)?;
    write_results(&bundle, &dir)?;
    write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    let s = bundle.summary();
    println!(
        "{}: {} run(s), final accuracy {:.4}, post-t0 accuracy {:.4}, fp rate {:.2}%{}",
        s.name.as_deref().unwrap_or("experiment"),
        s.n_runs,
        s.final_accuracy,
        s.post_t0_accuracy,
        s.fp_rate,
        s.twin_final_accuracy
            .map(|t| format!(", twin {t:.4}"))
            .unwrap_or_default()
    );
    println!("results in {}", dir.display());
    Ok(())
}

fn run_sweep(c: &Common) -> Outcome {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Failure::Validation("sweep requires --config".into()))?;
    let mut spec = parse_sweep(&read_text(path)?)?;
    if let Some(seed) = c.seed {
        if let Value::Object(base) = &mut spec.base {
            base.insert("seed".into(), seed.into());
            base.insert("seeds".into(), Value::Array(vec![seed.into()]));
        }
    }
    let dir = out_dir(c, None, "sigfl-sweep");
    let table = sweep(&spec, Some(&dir))?;
    let failed = table.points.iter().filter(|p| p.outcome.is_err()).count();
    print!("{}", table.to_csv());
    if let Some(up) = table.non_decreasing {
        println!("final accuracy non-decreasing along the axis: {up}");
    }
    println!(
        "{} point(s), {failed} failed; results in {}",
        table.points.len(),
        dir.display()
    );
    Ok(())
}

fn verify_theory(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let seed = c.seed.unwrap_or(cfg.seed);
    let report = run_theory(&cfg, seed)?;
    let dir = out_dir(c, cfg.output_dir.as_deref(), "sigfl-theory");
    write_theory_report(&report, &dir)?;
    print_theory(&report);
    println!("report in {}", dir.join("theory_report.json").display());
    let theorem_ok = report.theorem_pass_rate.is_none_or(|r| r >= 0.99);
    if report.lemma_pass_rate == 1.0 && theorem_ok && report.error_scaling.within_tolerance {
        Ok(())
    } else {
        Err(Failure::Runtime("theory checks failed".into()))
    }
}

fn print_theory(r: &TheoryReport) {
    println!(
        "rho {:.4e}, mu {:.4e}, eta {:.4e}, {} rounds checked",
        r.rho,
        r.mu,
        r.eta,
        r.records.len()
    );
    println!("lemma holds in {:.1}% of rounds", 100.0 * r.lemma_pass_rate);
    if let Some(t) = r.theorem_pass_rate {
        println!("optimality-gap bound holds in {:.1}% of rounds", 100.0 * t);
    }
    println!("error bound holds in {:.1}% of rounds", 100.0 * r.error_bound_pass_rate);
    let s = &r.error_scaling;
    println!(
        "median |e| {:.4e} (D={}) vs {:.4e} (D={}): ratio {:.3}, expected {:.3}, within tolerance {}",
        s.median_base, s.base_size, s.median_scaled, s.scaled_size, s.ratio, s.expected, s.within_tolerance
    );
    for w in &r.warnings {
        println!("warning: {w}");
    }
}
