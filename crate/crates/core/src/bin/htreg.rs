use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use htreg::data::load_checkpoint;
use htreg::harness::{analysis_csv, analyze_model, run_experiment, run_gradcheck, ExperimentConfig, ExperimentError};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "htreg", version, about = "Heavy-tailed spectral regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config and write metrics CSVs.
    Train {
        config: PathBuf,
        /// Seeds trained concurrently (results do not depend on this).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        jobs: u64,
    },
    /// Print the per-layer spectral report of a checkpoint.
    Analyze {
        checkpoint: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn train(config: PathBuf, jobs: usize) -> Result<(), (u8, String)> {
    let cfg = ExperimentConfig::load(&config).map_err(|e| (EXIT_USAGE, format!("{}: {e}", config.display())))?;
    match run_experiment(&cfg, jobs) {
        Ok(outcome) => {
            println!("{}", outcome.summary_path.display());
            Ok(())
        }
        Err(e) => {
            let code = if e.is_usage_error() { EXIT_USAGE } else { EXIT_RUNTIME };
            let msg = match e {
                ExperimentError::Config(_) => format!("{}: {e}", config.display()),
                _ => e.to_string(),
            };
            Err((code, msg))
        }
    }
}

fn analyze(checkpoint: PathBuf, out: Option<PathBuf>) -> Result<(), (u8, String)> {
    let runtime = |e: &dyn std::fmt::Display| (EXIT_RUNTIME, e.to_string());
    let (model, _) = load_checkpoint(&checkpoint).map_err(|e| runtime(&e))?;
    let layers = analyze_model(&model).map_err(|e| runtime(&e))?;
    let csv = analysis_csv(&layers);
    match out {
        Some(path) => std::fs::write(&path, csv).map_err(|e| (EXIT_RUNTIME, format!("{}: {e}", path.display()))),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn gradcheck(seed: u64, corrupt: Option<String>) -> Result<(), (u8, String)> {
    let report = run_gradcheck(seed, corrupt.as_deref());
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report.failures().map(|e| format!("{} ({})", e.check, e.shape)).collect();
        Err((EXIT_RUNTIME, format!("gradient check failed: {}", names.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { config, jobs } => train(config, jobs as usize),
        Command::Analyze { checkpoint, out } => analyze(checkpoint, out),
        Command::Gradcheck { seed, corrupt } => gradcheck(seed, corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            error!("{msg}");
            ExitCode::from(code)
        }
    }
}
