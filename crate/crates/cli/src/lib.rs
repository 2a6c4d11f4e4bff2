//! Command-line driver for the macrohydro numerical lab.

pub mod battery;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::battery::{BatteryOptions, NOMINAL_PATHS};
use crate::config::{ScenarioConfig, Task};
use crate::error::{CliError, EXIT_CONFIG, EXIT_OK, EXIT_VERIFICATION};
use crate::output::{json_string, unix_now, Manifest, OutputDir};
use crate::pipeline::{Mutation, RunOptions};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "MACROHYDRO_THREADS";

#[derive(Debug, Parser)]
#[command(name = "macrohydro", version, about = "Reservoir-driven nonlinear diffusion: steady states, linearised fluctuations, long-range correlations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the steady boundary-value problem.
    Steady(CommonArgs),
    /// Steady state plus the linearised generator and its spectrum.
    Linop(CommonArgs),
    /// Stationary covariance, long-range part and criterion.
    Covariance(CommonArgs),
    /// Ensemble simulation and statistical checks against the linear theory.
    Simulate(CommonArgs),
    /// Run the acceptance battery.
    Verify(VerifyArgs),
    /// Run the tasks listed in the configuration.
    Run(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long, value_enum, hide = true)]
    pub mutate: Option<Mutation>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Accepted for symmetry with the other commands; the battery is fixed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Paths of the criterion-7 ensemble; other ensembles scale with it.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Comma-separated subset of criteria.
    #[arg(long, value_delimiter = ',')]
    pub criteria: Option<Vec<u8>>,
    #[arg(long, value_enum, hide = true)]
    pub mutate: Option<Mutation>,
}

fn run_scenario(args: &CommonArgs, tasks: Option<&[Task]>, command: &str) -> Result<i32, CliError> {
    let (cfg, bytes) = ScenarioConfig::load(&args.config)?;
    let tasks: Vec<Task> = match tasks {
        Some(t) => t.to_vec(),
        None if cfg.tasks.is_empty() => vec![Task::Steady, Task::Linop, Task::Covariance],
        None => cfg.tasks.clone(),
    };
    let opts = RunOptions {
        out_dir: args.out.clone(),
        seed: args.seed,
        paths: args.paths,
        mutation: args.mutate,
    };
    let outcome = pipeline::run_config(&cfg, &bytes, &tasks, &opts, command)?;
    eprintln!("outputs written to {}", outcome.out_dir.display());
    Ok(if outcome.failed { EXIT_VERIFICATION } else { EXIT_OK })
}

fn run_verify(args: &VerifyArgs) -> Result<i32, CliError> {
    if let Some(ids) = &args.criteria {
        if let Some(bad) = ids.iter().find(|&&id| !(1..=11).contains(&id)) {
            return Err(CliError::Config(format!("--criteria: no criterion {bad}")));
        }
    }
    let started = unix_now();
    let clock = Instant::now();
    let opts = BatteryOptions {
        paths: args.paths.unwrap_or(NOMINAL_PATHS).max(2),
        mutation: args.mutate,
        only: args.criteria.clone(),
    };
    let results = battery::run_battery(&opts, |r| println!("{}", r.line()));
    println!("{}", battery::summary_table(&results));
    if let Some(dir) = &args.out {
        let mut out = OutputDir::create(dir)?;
        out.write("verify.json", &json_string(&results))?;
        let manifest = Manifest {
            tool: "macrohydro",
            version: env!("CARGO_PKG_VERSION"),
            command: "verify".into(),
            config_sha256: None,
            seeds: vec![battery::SEED],
            n_paths: Some(opts.paths),
            threads: macrohydro::par::current_threads(),
            started_unix: started,
            finished_unix: unix_now(),
            wall_clock_seconds: clock.elapsed().as_secs_f64(),
            outputs: out.entries().to_vec(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, json_string(&manifest)).map_err(|source| CliError::Io { path, source })?;
    }
    Ok(battery::exit_code(&results))
}

/// Executes a parsed command line and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    use Task::*;
    let result = match &cli.command {
        Command::Steady(a) => run_scenario(a, Some(&[Steady]), "steady"),
        Command::Linop(a) => run_scenario(a, Some(&[Steady, Linop]), "linop"),
        Command::Covariance(a) => run_scenario(a, Some(&[Steady, Linop, Covariance]), "covariance"),
        Command::Simulate(a) => run_scenario(a, Some(&[Steady, Linop, Covariance, Simulate]), "simulate"),
        Command::Run(a) => run_scenario(a, None, "run"),
        Command::Verify(a) => run_verify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `args`, honouring [`THREADS_ENV`], and runs the command.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match std::env::var(THREADS_ENV).ok().map(|v| v.trim().parse::<usize>()) {
        None => execute(&cli),
        Some(Ok(threads)) if threads > 0 => macrohydro::par::with_threads(threads, || execute(&cli)),
        Some(_) => {
            eprintln!("error: {THREADS_ENV} must be a positive integer");
            EXIT_CONFIG
        }
    }
}
