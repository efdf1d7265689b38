//! `semran` command-line entry point: run scenario presets, validate
//! config files, and run the standalone oracles.
//!
//! Exit codes: 0 on success, 1 on a validation error (bad arguments,
//! config, or a failed oracle), 2 on a runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use semran::config::{Paradigm, ScenarioConfig};
use semran::experiments::{parse_overrides, plan, run_scenario, ExperimentError, Scenario};
use semran::oracle;

#[derive(Parser, Debug)]
#[command(name = "semran", version = semran::BUILD_TAG, about = "Two-timescale semantic-agentic RAN simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario preset over seeds 1..=N.
    Run {
        #[arg(long, value_parser = parse_scenario)]
        scenario: Scenario,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// `key = value` overrides applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip the per-cell JSON-lines traces.
        #[arg(long)]
        no_traces: bool,
    },
    /// Parse and validate a standalone config file.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a brute-force oracle.
    Oracle {
        #[arg(long, value_enum)]
        check: Check,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Check {
    Pareto,
    Gradcheck,
    Nash,
    Kpi,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse()
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run_cmd(scenario: Scenario, seeds: u64, out: PathBuf, config: Option<PathBuf>, jobs: usize, no_traces: bool) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(Failure::Validation("--seeds must be >= 1".into()));
    }
    if jobs == 0 {
        return Err(Failure::Validation("--jobs must be >= 1".into()));
    }
    let overrides = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
            parse_overrides(&text)?
        }
        None => Vec::new(),
    };
    let seed_list: Vec<u64> = (1..=seeds).collect();
    let p = plan(scenario, &seed_list, &overrides)?;
    eprintln!("{}: {} cells on {} thread(s)", scenario, p.n_cells(), jobs);
    let o = run_scenario(&p, &out, jobs, !no_traces)?;
    println!("{}", o.csv.display());
    if let Some(t) = o.traces {
        println!("{}", t.display());
    }
    println!("{}", o.manifest.display());
    Ok(())
}

fn oracle_cmd(check: Check) -> Result<(), Failure> {
    let ok = match check {
        Check::Pareto => {
            let bad = oracle::pareto_mismatches(200, 200, 1);
            println!("pareto: {bad} mismatches over 200 sets of 200 points");
            bad == 0
        }
        Check::Gradcheck => {
            let r = oracle::gradcheck(20);
            println!(
                "gradcheck: {} instances, worst relative error codec {:.3e}, actor {:.3e}",
                r.instances, r.codec_worst, r.actor_worst
            );
            r.codec_worst <= 1e-4 && r.actor_worst <= 1e-4
        }
        Check::Nash => {
            let r = oracle::nash_check(10, 1e-2);
            println!(
                "nash: equilibrium {:?} payoff {:?}; {}/{} seeds converged",
                r.equilibrium, r.payoff, r.passed, r.seeds
            );
            r.passed >= 9
        }
        Check::Kpi => {
            let mut worst = 0.0f64;
            for p in [Paradigm::TrRan, Paradigm::AiORan, Paradigm::SemComOnly, Paradigm::TwoTimescale] {
                let d = oracle::kpi_trace_mismatch(p, 2_000, 1).map_err(Failure::Runtime)?;
                println!("kpi: {p} max scaled difference {d:.3e}");
                worst = worst.max(d);
            }
            worst <= 1e-12
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Failure::Validation(format!("oracle {check:?} failed")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            seeds,
            out,
            config,
            jobs,
            no_traces,
        } => run_cmd(scenario, seeds, out, config, jobs, no_traces),
        Command::Validate { config } => match ScenarioConfig::load(&config) {
            Ok(cfg) => {
                println!("ok {}", cfg.hash());
                Ok(())
            }
            Err(semran::config::ConfigError::Io { path, source }) => Err(Failure::Runtime(format!("{path}: {source}"))),
            Err(e) => Err(Failure::Validation(e.to_string())),
        },
        Command::Oracle { check } => oracle_cmd(check),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
