//! `levy-codebook`: config-driven pricing, evolution, checks and round trips.
//!
//! Exit codes: 0 pass, 1 check failure, 2 usage or config error, 3 numerical failure.

mod commands;
mod staging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use levy_codebook::config::RunConfig;
use levy_codebook::Error;

#[derive(Parser)]
#[command(name = "levy-codebook", version, about = "Codebook option-surface models from the command line")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Price the configured codebook: call surface and modified price slices.
    Price(Args),
    /// Evolve the codebook along a subordinator path.
    Evolve(Args),
    /// Run Monte Carlo, static-arbitrage and breakdown checks.
    Check(Args),
    /// Codebook -> prices -> codebook, reporting the largest interior-cell error.
    Roundtrip(Args),
}

#[derive(clap::Args, Clone)]
pub struct Args {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created or filled atomically).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Solver for `evolve`.
    #[arg(long, value_enum, default_value_t = Solver::Picard)]
    pub solver: Solver,
    /// Comma-separated checks for `check`: cf, martingale, arbitrage, tau.
    #[arg(long, value_delimiter = ',')]
    pub checks: Option<Vec<String>>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Picard,
    Event,
    Both,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Picard => "picard",
            Solver::Event => "event",
            Solver::Both => "both",
        }
    }
}

pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("io error: {e}"))
    }
}

fn load_config(args: &Args) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    Ok(cfg)
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("LEVY_CODEBOOK_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Failure::Usage(format!("LEVY_CODEBOOK_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    init_threads()?;
    match cli.command {
        Command::Price(a) => commands::price(&load_config(&a)?, &a),
        Command::Evolve(a) => commands::evolve(&load_config(&a)?, &a),
        Command::Check(a) => commands::check(&load_config(&a)?, &a),
        Command::Roundtrip(a) => commands::roundtrip(&load_config(&a)?, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}
