//! `paai`: ingest, statistics, calibration, training, simulation and evaluation
//! of car-following models, one subcommand per stage.
//!
//! Every subcommand writes into `--output` and leaves a `manifest.json` there;
//! `paai replay --manifest <file> --output <dir>` re-runs it.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::Config;
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "paai", version, about = "Car-following calibration, residual learning and evaluation")]
struct Cli {
    /// TOML config file; defaults to $PAAI_CONFIG when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Time step in seconds for resampling, synthesis and ring runs (overrides the config).
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    Ovrv,
    Idm,
    BaselineAi,
    OvrvPaai,
    IdmPaai,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassicArg {
    Ovrv,
    Idm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnedArg {
    BaselineAi,
    OvrvPaai,
    IdmPaai,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccLossArg {
    SmoothL1,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Raw log -> resampled, smoothed canonical trajectory plus train/validation/test splits.
    Ingest(IngestArgs),
    /// Synthetic follower trajectory plus splits.
    Synth(SynthArgs),
    /// Summary statistics, KDE, KS, jerk and spacing autocorrelation.
    Stats(StatsArgs),
    /// Grid-search calibration of a classical model.
    Calibrate(CalibrateArgs),
    /// Train a learned model ensemble.
    Train(TrainArgs),
    /// One-step acceleration predictions along a recorded trajectory.
    Predict(PredictArgs),
    /// Closed-loop replay of one model against a recorded trajectory.
    Simulate(SimulateArgs),
    /// Closed-loop comparison table of several models.
    Evaluate(EvaluateArgs),
    /// Ring-road platoon simulation.
    Ring(RingArgs),
    /// Consolidated report from stats, calibration and evaluation outputs.
    Report(ReportArgs),
    /// Re-run the invocation recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
    #[arg(long)]
    pub smooth_window: Option<usize>,
    #[arg(long)]
    pub time_col: Option<String>,
    #[arg(long)]
    pub lead_speed_col: Option<String>,
    #[arg(long)]
    pub foll_speed_col: Option<String>,
    #[arg(long)]
    pub spacing_col: Option<String>,
    /// Four GPS columns `lead_lat,lead_lon,foll_lat,foll_lon`; replaces the spacing column.
    #[arg(long, value_delimiter = ',')]
    pub gps_cols: Option<Vec<String>>,
    #[arg(long)]
    pub delimiter: Option<char>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub model: ClassicArg,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 6000)]
    pub steps: usize,
    /// Add phase-dependent extra thrust/braking and acceleration noise.
    #[arg(long)]
    pub asymmetric: bool,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Further trajectories; KS distances are reported against `--input`.
    #[arg(long)]
    pub compare: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    /// Trajectory to fit, normally the training split.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: ClassicArg,
    /// Axis override `name=lo:hi:steps`, repeatable.
    #[arg(long)]
    pub grid: Vec<String>,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Directory holding train.csv, validation.csv and test.csv.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: LearnedArg,
    /// Calibration or classical-model JSON for the base law; defaults to the EV ACC parameters.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub acc_loss: Option<AccLossArg>,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

/// A model chosen either by name (classical models with default parameters)
/// or by file (calibration result, classical model JSON or ensemble manifest).
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelSel {
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub model_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelSel,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelSel,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Test trajectory.
    #[arg(long)]
    pub input: PathBuf,
    /// Classical model with default parameters, repeatable. Rows come first.
    #[arg(long, value_enum)]
    pub model: Vec<ClassicArg>,
    /// Calibration result, classical model or ensemble manifest, repeatable.
    #[arg(long)]
    pub model_file: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RingArgs {
    #[command(flatten)]
    pub model: ModelSel,
    #[arg(long)]
    pub vehicles: Option<usize>,
    #[arg(long)]
    pub length: Option<f64>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub comparison: Option<PathBuf>,
    #[arg(long)]
    pub calibration: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Synth(_) => "synth",
            Command::Stats(_) => "stats",
            Command::Calibrate(_) => "calibrate",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Simulate(_) => "simulate",
            Command::Evaluate(_) => "evaluate",
            Command::Ring(_) => "ring",
            Command::Report(_) => "report",
            Command::Replay(_) => "replay",
        }
    }

    fn output_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::Ingest(a) => &mut a.output,
            Command::Synth(a) => &mut a.output,
            Command::Stats(a) => &mut a.output,
            Command::Calibrate(a) => &mut a.output,
            Command::Train(a) => &mut a.output,
            Command::Predict(a) => &mut a.output,
            Command::Simulate(a) => &mut a.output,
            Command::Evaluate(a) => &mut a.output,
            Command::Ring(a) => &mut a.output,
            Command::Report(a) => &mut a.output,
            Command::Replay(a) => &mut a.output,
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf> {
    if let Command::Replay(r) = &cli.command {
        if cli.config.is_some() || cli.seed.is_some() || cli.dt.is_some() {
            bail!("replay takes its configuration from the manifest; drop --config/--seed/--dt");
        }
        let m = RunManifest::load(&r.manifest)?;
        m.verify_inputs()?;
        let mut cmd = m.command.clone();
        *cmd.output_mut() = r.output.clone();
        return commands::execute(&cmd, &m.config);
    }
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(dt) = cli.dt {
        cfg.dt = dt;
    }
    commands::execute(&cli.command, &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
