//! `hyphy`: run, check and describe experiment configurations.

use std::path::PathBuf;
use std::process::ExitCode;

use std::io::Write;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use hyphy_core::experiments::{run_experiment, schema_text, ExperimentConfig, RESULTS_SCHEMA};
use hyphy_core::Error;

#[derive(Parser)]
#[command(name = "hyphy", version, about = "Hybrid physics/learning classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSVs and manifest.
    Run {
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Published sample counts and network sizes for unset keys.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Parse a configuration and print it fully resolved.
    Validate { config: PathBuf },
    /// List every configuration key and the result CSV layout.
    Schema,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn load(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow!("reading {}: {e}", path.display()))?;
    Ok(ExperimentConfig::parse(&text)?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::SingularModel(_) | Error::Numerical(_)) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Run { config, seed, out, paper_scale } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            if let Some(dir) = out {
                cfg = cfg.with_output_dir(&dir.to_string_lossy());
            }
            if paper_scale {
                cfg = cfg.with_paper_scale();
            }
            let (table, files) = run_experiment(&cfg)?;
            writeln!(stdout, "{}: {} result rows", cfg.experiment, table.rows.len())?;
            for f in files {
                writeln!(stdout, "wrote {}", f.display())?;
            }
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            write!(stdout, "{}", cfg.resolved()?)?;
        }
        Command::Schema => {
            writeln!(stdout, "{}", schema_text())?;
            writeln!(stdout, "Result CSVs start with '#schema={RESULTS_SCHEMA} sweep=<name>' and have the columns")?;
            writeln!(stdout, "sweep,method,metric,seed,value (metric: accuracy, ber, d_hat or tv_bound).")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed pipe (`hyphy schema | head`) is not a failure.
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
