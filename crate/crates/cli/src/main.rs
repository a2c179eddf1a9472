//! `fbsde` — simulate, fit, importance-sample and benchmark the double-well
//! exit problem from JSON configuration files.
//!
//! Exit status: 0 on success, 1 for invalid input (arguments, unreadable or
//! invalid configuration), 2 when the numerics fail.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FBSDE_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "fbsde",
    version,
    about = "FBSDE solver and importance sampler for metastable exit problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Output directory (default: `outputs.dir` of the config, then $FBSDE_OUT_DIR, then `results`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forward ensemble and summary statistics.
    Simulate(ConfigArgs),
    /// One backward solve; writes coefficients, diagnostics and the estimate.
    Solve(ConfigArgs),
    /// PDE reference value V_ref for the double-well problem.
    Reference(ReferenceArgs),
    /// Fit a policy and importance-sample with it.
    Estimate(ConfigArgs),
    /// Run the benchmark rows (built-in set unless a config is given).
    Table1(OptionalConfigArgs),
    /// Drift-changed simulation cut at T̃ with per-trajectory stopping.
    EarlyHorizon(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct OptionalConfigArgs {
    /// Table configuration (JSON with a `rows` array).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    /// Experiment configuration; its `problem` and `reference` sections are used.
    #[arg(long, conflicts_with_all = ["sigma", "horizon", "x", "epsilon"])]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    pub sigma: Option<f64>,
    #[arg(long = "T", required_unless_present = "config")]
    pub horizon: Option<f64>,
    #[arg(long, allow_hyphen_values = true, default_value_t = -1.0)]
    pub x: f64,
    #[arg(long, default_value_t = fbsde_core::model::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[command(flatten)]
    pub common: Common,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<fbsde_core::Error> for CliError {
    fn from(e: fbsde_core::Error) -> Self {
        if e.is_validation() {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

fn init(common: &Common) -> Result<(), CliError> {
    let level = match common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(CliError::Invalid("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invalid(format!("cannot start {n} workers: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let common = match &cli.command {
        Command::Simulate(a)
        | Command::Solve(a)
        | Command::Estimate(a)
        | Command::EarlyHorizon(a) => &a.common,
        Command::Reference(a) => &a.common,
        Command::Table1(a) => &a.common,
    };
    let result = init(common).and_then(|()| match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Solve(a) => commands::solve(a),
        Command::Reference(a) => commands::reference(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Table1(a) => commands::table1(a),
        Command::EarlyHorizon(a) => commands::early_horizon(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
