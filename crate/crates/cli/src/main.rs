use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use oclbench_core::experiment::{dump_scenario, grad_check_suite};
use oclbench_core::weights::{format_shape, read_header};
use oclbench_core::{parse_config, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "oclbench", version, about = "Task-free online continual learning toy bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write the CSV artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-sample task assignment of one seed.
    DumpScenario {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the tensors stored in a weight file.
    InspectWeights { path: PathBuf },
    /// Compare autodiff gradients of the configured model with finite
    /// differences.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("OCLBENCH_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("OCLBENCH_THREADS={v:?} is not a count"))?;
            Ok(Some(n.max(1)))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let summary = run_experiment(&cfg, threads_from_env()?)?;
            for (metric, mean, std, n) in &summary.aggregate {
                println!("{metric}: {mean:.4} ± {std:.4} ({n} seeds)");
            }
            println!("artifacts in {}", summary.out_dir.display());
            if summary.failures.is_empty() {
                return Ok(ExitCode::SUCCESS);
            }
            for (seed, e) in &summary.failures {
                eprintln!("seed {seed} failed: {e}");
            }
            Ok(ExitCode::FAILURE)
        }
        Command::DumpScenario { config, seed, out } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let csv = dump_scenario(&cfg, seed)?;
            match out {
                Some(p) => std::fs::write(&p, csv)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::InspectWeights { path } => {
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let entries = read_header(&bytes).with_context(|| format!("in {}", path.display()))?;
            println!("name,shape,offset");
            for e in entries {
                println!("{},{},{}", e.name, format_shape(&e.shape), e.offset);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck {
            config,
            batch,
            step,
            tol,
        } => {
            let cfg = load_config(&config)?;
            if step.is_nan() || step <= 0.0 {
                bail!("--step must be positive");
            }
            let report = grad_check_suite(&cfg, batch, step)?;
            println!(
                "checked {} entries, max relative error {:e}",
                report.checked, report.max_rel_err
            );
            if report.max_rel_err <= tol {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check failed: tolerance {tol:e}");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
