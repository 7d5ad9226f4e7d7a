//! Command-line front end: dataset preparation, training, evaluation,
//! inference, diversity studies and gradient self-checks.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "denoiserank", version, about = "Diffusion-based learning to rank")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse LETOR files, normalize with training statistics, write caches.
    Prepare(Common),
    /// Train a model and keep the checkpoint with the best validation NDCG@10.
    Train(Common),
    /// Rank the test split and report metrics.
    Evaluate(Common),
    /// Write per-document scores and ranks for the test split.
    Infer(Common),
    /// Repeat inference per query and report RSD and NDCG.
    Diversity(Common),
    /// Run every finite-difference check and the schedule invariants.
    Gradcheck(Common),
    /// Write synthetic LETOR files.
    Synth(Common),
    /// List every configuration key with its default.
    Keys,
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Recommended settings for a benchmark: web30k, yahoo or istella.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one key, e.g. `--set epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.preset.as_deref(), self.config.as_deref(), &self.overrides)
    }
}

fn init_threads(cfg: &RunConfig) -> Result<(), CliError> {
    let n = cfg.threads()?;
    if n > 0 {
        // a pool built earlier in the same process is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Keys => {
            for (k, v, d) in config::SCHEMA {
                println!("{k:<18} {v:<18} {d}");
            }
            return Ok(());
        }
        Command::Prepare(c)
        | Command::Train(c)
        | Command::Evaluate(c)
        | Command::Infer(c)
        | Command::Diversity(c)
        | Command::Gradcheck(c)
        | Command::Synth(c) => c,
    };
    let cfg = common.resolve()?;
    init_threads(&cfg)?;
    match cli.command {
        Command::Prepare(_) => commands::prepare(&cfg).map(drop),
        Command::Train(_) => commands::train(&cfg).map(drop),
        Command::Evaluate(_) => commands::evaluate(&cfg).map(drop),
        Command::Infer(_) => commands::infer(&cfg).map(drop),
        Command::Diversity(_) => commands::diversity(&cfg).map(drop),
        Command::Gradcheck(_) => commands::gradcheck(&cfg),
        Command::Synth(_) => commands::synth(&cfg).map(drop),
        Command::Keys => unreachable!("handled above"),
    }
}
