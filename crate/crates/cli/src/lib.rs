//! The `scar` command line: every subcommand writes its outputs plus a
//! `<command>.manifest.json` into `--out`.

pub mod commands;
pub mod data;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;
pub use manifest::{FileEntry, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "scar", version, about = "Cross-embodiment latent-action world models on synthetic worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset from a world spec.
    Gen(GenArgs),
    /// Train one variant, or pretrain the FDM alone.
    Train(TrainArgs),
    /// Target and transfer rollout metrics for every checkpoint in a directory.
    Eval(EvalArgs),
    /// Action probes, latent recovery and pushforward tests.
    Probe(EvalArgs),
    /// Embodiment leakage of cross-embodiment rollouts.
    Leakage(LeakageArgs),
    /// Train and compare action-to-latent controllers on a checkpoint.
    A2l(A2lArgs),
    /// Numerical theory checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "pretrain_only")]
    pub variant: Option<String>,
    /// `[train]` and `[model]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint whose `fdm.` parameters seed the FDM.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Only run action-free FDM pretraining and write `fdm-pretrain.ckpt`.
    #[arg(long)]
    pub pretrain_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LeakageArgs {
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target contexts paired with source latents, per source embodiment.
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct A2lArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `[a2l]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// vmf-small, vmf-medium, vmf-large, lemma or all.
    #[arg(long)]
    pub preset: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one parsed command line; `argv` is recorded in the manifest.
pub fn run(cli: &Cli, argv: &[String]) -> Result<RunManifest, CliError> {
    match &cli.command {
        Command::Gen(a) => commands::gen(a, argv),
        Command::Train(a) => commands::train(a, argv),
        Command::Eval(a) => commands::eval(a, argv),
        Command::Probe(a) => commands::probe(a, argv),
        Command::Leakage(a) => commands::leakage(a, argv),
        Command::A2l(a) => commands::a2l(a, argv),
        Command::Verify(a) => commands::verify(a, argv),
    }
}
