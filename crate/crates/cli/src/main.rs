use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Pattern-matching memory network traffic forecaster.
#[derive(Parser)]
#[command(name = "pmmn", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cluster training-split daily patterns into a key bank.
    ExtractPatterns(Common),
    /// Train a model, or resume one with `--set resume=PATH`.
    Train(Common),
    /// Per-horizon MAE/MAPE/RMSE next to the historical-average baseline.
    Evaluate(Common),
    /// Forecast the horizon after one origin.
    Forecast(Common),
    /// Generate a synthetic dataset and distance table.
    Synth(Common),
}

#[derive(Args)]
#[command(args_override_self = true)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Takes precedence over PMMN_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    distances: Option<PathBuf>,
    #[arg(long)]
    patterns: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Train the attention-only ablation.
    #[arg(long)]
    simple_mem: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &c.config {
        cfg.apply_file(p)?;
    }
    if let Ok(s) = std::env::var("PMMN_SEED") {
        cfg.set("seed", &s).context("PMMN_SEED")?;
    }
    for pair in &c.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(p) = &c.out_dir {
        cfg.out_dir = p.clone();
    }
    for (field, value) in [
        (&mut cfg.dataset, &c.dataset),
        (&mut cfg.distances, &c.distances),
        (&mut cfg.patterns, &c.patterns),
        (&mut cfg.checkpoint, &c.checkpoint),
    ] {
        if value.is_some() {
            field.clone_from(value);
        }
    }
    if c.simple_mem {
        cfg.model.simple_mem = true;
    }
    if let Some(l) = c.layers {
        cfg.model.layers = l;
    }
    if let Some(k) = c.k {
        cfg.model.k = k;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (common, f): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.cmd {
        Cmd::ExtractPatterns(c) => (c, commands::extract_patterns_cmd),
        Cmd::Train(c) => (c, commands::train),
        Cmd::Evaluate(c) => (c, commands::evaluate_cmd),
        Cmd::Forecast(c) => (c, commands::forecast),
        Cmd::Synth(c) => (c, commands::synth),
    };
    let cfg = build_config(common)?;
    f(&cfg)
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<pmmn::Error>())
        .map(pmmn::Error::kind)
        .unwrap_or("invalid")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
