//! Command-line runner for the spatial models.

mod compare;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "laplace-mh", version, about = "Laplace approximations inside Metropolis-Hastings for spatial models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model described by a JSON config and write its results.
    Run {
        config: PathBuf,
        /// Validate the config and data, print the resolved config and stop.
        #[arg(long)]
        dry_run: bool,
        /// Threads used for the hyperparameter grid of each conditional fit.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory, overriding the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare the marginals of two result directories.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the comparison as JSON to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical { message: String, theta: Option<Vec<f64>> },
    Output(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Output(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical { .. } => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical { message, theta: Some(t) } => {
                write!(f, "numerical failure at theta_c = {t:?}: {message}")
            }
            CliError::Numerical { message, theta: None } => write!(f, "numerical failure: {message}"),
            CliError::Output(m) => write!(f, "cannot write output: {m}"),
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            dry_run,
            workers,
            output,
        } => run::run(
            &config,
            &run::RunOptions {
                dry_run,
                workers,
                output,
            },
        ),
        Command::Compare { a, b, json } => {
            let report = compare::compare_dirs(&a, &b)?;
            print!("{}", report.table());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Output(e.to_string()))?;
                std::fs::write(&path, text + "\n").map_err(|e| CliError::Output(e.to_string()))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("laplace-mh: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
