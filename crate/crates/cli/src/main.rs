//! Experiment driver: `privcloud <verb> --config run.toml`.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Mode, RunConfig};

/// Failure of a numeric acceptance test (residual too large, divergence).
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

#[derive(Parser)]
#[command(name = "privcloud", version, about = "Private cloud-coordinated constrained optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override `output_dir`
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Override `iterations`
    #[arg(short, long)]
    iterations: Option<u64>,
    /// Override `seeds`, comma separated
    #[arg(short, long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the noise-free reference saddle point z0
    Reference(Common),
    /// Run the (private) iteration for every seed
    Run(Common),
    /// Run the agent/cloud message-passing simulation for every seed
    Simulate(Common),
    /// Sequence terms, bounds and observed-vs-bound comparison for traces
    Analyze(Common),
    /// Run the randomized property suites
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn load(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &c.output_dir {
        cfg.output_dir = o.clone();
    }
    if let Some(i) = c.iterations {
        cfg.iterations = i;
    }
    if let Some(s) = &c.seeds {
        cfg.seeds = s.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Reference(c) => commands::cmd_reference(&load(&c)?).map(|_| true),
        Command::Run(c) => commands::cmd_run(&load(&c)?, Mode::Solve).map(|_| true),
        Command::Simulate(c) => commands::cmd_run(&load(&c)?, Mode::Cloudsim).map(|_| true),
        Command::Analyze(c) => commands::cmd_analyze(&load(&c)?).map(|_| true),
        Command::Check { common, seed } => {
            let results = commands::cmd_check(&load(&common)?, seed)?;
            Ok(results.iter().all(|r| r.passed))
        }
    }
}

/// 2 for numeric failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericFailure>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<privcloud::Error>() {
            if matches!(
                e,
                privcloud::Error::NonFinite { .. } | privcloud::Error::Divergence { .. }
            ) {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: property checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
