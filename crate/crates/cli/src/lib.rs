//! Batch driver: calibrate, simulate, value, hedge, backtest and measure
//! model risk, writing CSV/JSON reports and a replay manifest.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use gas_storage::params_io::KeyValues;
use gas_storage::{Error, Result};

pub mod commands;
pub mod config;
pub mod output;

use commands::Context;
use config::RunConfig;
use output::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "gas-storage", version, about = "Gas storage valuation and hedging")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed_backward: Option<u64>,
    #[arg(long, global = true)]
    pub seed_forward: Option<u64>,
    #[arg(long, global = true)]
    pub seed_risk: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Storage preset: fast or slow.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Spot model: 1 or 2.
    #[arg(long, global = true)]
    pub model: Option<u8>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Lease start date (YYYY-MM-DD).
    #[arg(long, global = true)]
    pub start: Option<String>,
    #[arg(long, global = true)]
    pub spot_csv: Option<PathBuf>,
    #[arg(long, global = true)]
    pub curve_csv: Option<PathBuf>,
    #[arg(long, global = true)]
    pub futures_params: Option<PathBuf>,
    #[arg(long, global = true)]
    pub spot_params: Option<PathBuf>,
    /// Hedge: delta1 or delta2.
    #[arg(long, global = true)]
    pub delta: Option<String>,
    /// Comma-separated lease years for the backtest.
    #[arg(long, global = true)]
    pub years: Option<String>,
    #[arg(long, global = true)]
    pub family_size: Option<usize>,
    /// Any configuration key as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Fit the two-factor futures model to the curve history.
    CalibrateFutures,
    /// Fit a spot model to the spot history.
    CalibrateSpot,
    /// Write one synthetic spot and curve history.
    Simulate,
    /// Fit the storage policy and hedge, then evaluate on fresh paths.
    Value,
    /// Static futures-only value on the lease start curve.
    Intrinsic,
    /// Rolling intrinsic value over the lease window.
    RollingIntrinsic,
    /// Per-year simulated and historical results.
    Backtest,
    /// Value and wealth ranges over a perturbed spot-model family.
    ModelRisk,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CalibrateFutures => "calibrate-futures",
            Command::CalibrateSpot => "calibrate-spot",
            Command::Simulate => "simulate",
            Command::Value => "value",
            Command::Intrinsic => "intrinsic",
            Command::RollingIntrinsic => "rolling-intrinsic",
            Command::Backtest => "backtest",
            Command::ModelRisk => "model-risk",
        }
    }
}

/// Config file first, then flags; paths are kept as given.
pub fn merged_config(g: &GlobalArgs) -> Result<KeyValues> {
    let mut kv = match &g.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    let path = |p: &PathBuf| p.display().to_string();
    let flags: [(&str, Option<String>); 14] = [
        ("seed_backward", g.seed_backward.map(|v| v.to_string())),
        ("seed_forward", g.seed_forward.map(|v| v.to_string())),
        ("seed_risk", g.seed_risk.map(|v| v.to_string())),
        ("preset", g.preset.clone()),
        ("model", g.model.map(|v| v.to_string())),
        ("n_paths", g.paths.map(|v| v.to_string())),
        ("start", g.start.clone()),
        ("spot_csv", g.spot_csv.as_ref().map(path)),
        ("curve_csv", g.curve_csv.as_ref().map(path)),
        ("futures_params", g.futures_params.as_ref().map(path)),
        ("spot_params", g.spot_params.as_ref().map(path)),
        ("delta", g.delta.clone()),
        ("years", g.years.clone()),
        ("family_size", g.family_size.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    for s in &g.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::from_kv(merged_config(&cli.global)?)?;
    let out = OutputDir::create(&cli.global.out)?;
    let mut ctx = Context::new(cfg, out);
    match cli.command {
        Command::CalibrateFutures => commands::calibrate_futures(&mut ctx)?,
        Command::CalibrateSpot => commands::calibrate_spot(&mut ctx)?,
        Command::Simulate => commands::simulate(&mut ctx)?,
        Command::Value => commands::value(&mut ctx)?,
        Command::Intrinsic => commands::intrinsic(&mut ctx)?,
        Command::RollingIntrinsic => commands::rolling(&mut ctx)?,
        Command::Backtest => commands::backtest(&mut ctx)?,
        Command::ModelRisk => commands::model_risk(&mut ctx)?,
    }
    ctx.finish(cli.command.name())
}

/// Exit status for an error: 2 for configuration and usage problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}
