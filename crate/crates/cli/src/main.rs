mod fit;
mod output;
mod simulate;
mod train;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rtshift::error::Error;

#[derive(Parser, Debug)]
#[command(name = "rtshift", version, about = "Random time-shift inference for within-host viral dynamics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Root seed; every command is deterministic given it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0, env = "RTSHIFT_THREADS")]
    pub threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Simulate(simulate::SimulateArgs),
    /// Label hypercube points by simulation and train the surrogate network.
    TrainSurrogate(train::TrainArgs),
    /// Fit the hierarchical model to a dataset.
    Fit(fit::FitArgs),
    /// Run the stochastic-simulation oracle checks for one parameter set.
    Validate(validate::ValidateArgs),
}

/// Failures of numerical checks, reported with exit code 3.
#[derive(Debug)]
pub struct CheckFailures(pub Vec<String>);

impl std::fmt::Display for CheckFailures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed: {}", self.0.len(), self.0.join("; "))
    }
}

impl std::error::Error for CheckFailures {}

const EXIT_DATA: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailures>().is_some() {
        return EXIT_VALIDATION;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_IO;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Io(_)) => EXIT_IO,
        Some(Error::Csv(e)) if e.is_io_error() => EXIT_IO,
        Some(Error::Parse { .. } | Error::Validation(_) | Error::Csv(_) | Error::Json(_) | Error::Extrapolation { .. }) => EXIT_DATA,
        Some(Error::Training(_) | Error::Quadrature(_) | Error::Curvature { .. } | Error::InsufficientSurvivors { .. } | Error::Initialization(_)) => {
            EXIT_VALIDATION
        }
        _ => 1,
    }
}

pub fn absolute(p: &PathBuf) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.clone())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(&cli.global, a),
        Command::TrainSurrogate(a) => train::run(&cli.global, a),
        Command::Fit(a) => fit::run(&cli.global, a),
        Command::Validate(a) => validate::run(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
