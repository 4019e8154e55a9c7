use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context as _;
use clap::{Parser, Subcommand};

use adaptive_safety::config::Config;
use adaptive_safety::env::Condition;
use adaptive_safety::harness::{self, output, Experiment};

#[derive(Parser)]
#[command(name = "adaptive-safety", version, about = "Adaptive safety constraints for a nonstationary merge task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write summary.csv, run logs and the resolved config.
    Run {
        #[arg(long, value_parser = parse::<Experiment>)]
        experiment: Experiment,
        #[arg(long, default_value = "unseen", value_parser = parse::<Condition>)]
        condition: Condition,
        /// Number of seeds (defaults to `harness.seeds`).
        #[arg(long)]
        seeds: Option<usize>,
        /// Evaluation runs per seed (defaults to `harness.runs_per_seed`).
        #[arg(long)]
        runs_per_seed: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay the safety invariants over run logs; exits nonzero on any finding.
    Audit {
        #[arg(long)]
        logs: PathBuf,
    },
    /// Re-aggregate summary statistics from run logs.
    Report {
        #[arg(long)]
        logs: PathBuf,
        /// Where to write the recomputed CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse<T: std::str::FromStr<Err = adaptive_safety::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: adaptive_safety::Error| e.to_string())
}

fn main() -> ExitCode {
    match try_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn try_main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { experiment, condition, seeds, runs_per_seed, config, out } => {
            let cfg = match &config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            let seeds = harness::seeds(&cfg, seeds.unwrap_or(cfg.harness.seeds));
            let runs_per_seed = runs_per_seed.unwrap_or(cfg.harness.runs_per_seed);
            let started = Instant::now();
            let result = harness::run_experiment(&cfg, experiment, condition, &seeds, runs_per_seed)
                .with_context(|| format!("running {experiment} under {condition}"))?;
            harness::write_outputs(&result.rows, &result.runs, &cfg, &out)?;
            for row in &result.rows {
                let stat = |m: &str| row.stat(m).map_or((f64::NAN, f64::NAN), |s| (s.mean, s.std));
                let (v, vs) = stat("violations");
                let (r, rs) = stat("reward");
                let (c, cs) = stat("clearance");
                println!(
                    "{:<22} {:<10} violations {:>8.2} ± {:<7.2} reward {:>7.2} ± {:<6.2} clearance {:>8.1} ± {:.1}",
                    row.method, row.condition, v, vs, r, rs, c, cs
                );
            }
            eprintln!("{} runs in {:.1?}; outputs in {}", result.runs.len(), started.elapsed(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit { logs } => {
            let records = harness::read_runs(&logs)?;
            let report = harness::audit(&records);
            for f in &report.findings {
                println!("{f}");
            }
            println!(
                "audited {} runs, {} steps ({} shielded, {} admissible-checked, {} infeasible): {}",
                report.runs,
                report.steps,
                report.shielded_steps,
                report.checked_admissible,
                report.infeasible_steps,
                if report.passed() { "PASS" } else { "FAIL" }
            );
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Report { logs, out } => {
            let rows = harness::reaggregate(harness::read_runs(&logs)?);
            match out {
                Some(path) => output::write_summary(&rows, &path)?,
                None => output::write_summary_to(&rows, std::io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
