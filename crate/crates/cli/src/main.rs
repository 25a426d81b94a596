//! `stsens`: synthesize, prepare, train, evaluate and analyze county panels.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use commands::Ctx;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "stsens",
    version,
    about = "Temporal fusion transformer forecasting with Morris sensitivity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `section.key=value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Panel directory (`static.csv`, `dynamic/`, `targets/`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Model checkpoint written by `train`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Comma-separated Δ values for `morris`.
    #[arg(long, global = true)]
    delta: Option<String>,

    /// Feature to perturb in `morris`; repeatable.
    #[arg(long, global = true)]
    feature: Vec<String>,

    #[arg(long, global = true, value_enum)]
    split: Option<SplitMode>,

    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitMode {
    Primary,
    Custom,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic panel.
    Synth,
    /// Clean, scale and split a panel.
    Prepare,
    /// Train a model and write a checkpoint.
    Train,
    /// Score a checkpoint and the persistence baseline on the test split.
    Evaluate,
    /// Export attention profiles and variable importance.
    Attention,
    /// Compute Morris indices.
    Morris,
    /// Hyperparameter grid search.
    Grid,
    /// One model per static subgroup column.
    Subgroup,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(d) = &cli.data {
        cfg.set("data.dir", &d.display().to_string())?;
    }
    if let Some(c) = &cli.checkpoint {
        cfg.set("checkpoint", &c.display().to_string())?;
    }
    if let Some(d) = &cli.delta {
        cfg.set("morris.deltas", d)?;
    }
    if let Some(s) = cli.split {
        cfg.set(
            "split.mode",
            match s {
                SplitMode::Primary => "primary",
                SplitMode::Custom => "custom",
            },
        )?;
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STSENS_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("STSENS_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<PathBuf> {
    init_threads()?;
    let ctx = Ctx {
        cfg: build_config(&cli)?,
        out: cli.out.clone(),
        features: cli.feature.clone(),
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Prepare => commands::prepare_cmd(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Evaluate => commands::evaluate_cmd(&ctx),
        Command::Attention => commands::attention_cmd(&ctx),
        Command::Morris => commands::morris_cmd(&ctx),
        Command::Grid => commands::grid_cmd(&ctx),
        Command::Subgroup => commands::subgroup_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
