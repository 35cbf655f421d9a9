//! `occflow` command-line driver.

mod commands;
mod layout;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use occflow::config::ExperimentConfig;
use occflow::Error;

#[derive(Parser, Debug)]
#[command(name = "occflow", version, about = "Occupancy and flow prediction on synthetic driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Reference widths.
    Paper,
    /// Narrow model sized for a single CPU core.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Options shared by every subcommand that reads the experiment config.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML config file, layered over the preset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr_init=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenarios and a manifest.
    #[command(after_help = keys_help(&["data."]))]
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Base seed; overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on the training split of a data directory.
    #[command(after_help = keys_help(&[""]))]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Seed for initialization and batch order; overrides `model.seed` and `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Validate the config and data, then stop before the first step.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write a prediction archive for one split.
    #[command(after_help = keys_help(&["raster.", "model."]))]
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Training output directory holding `config.toml` and the checkpoint.
        #[arg(long, value_name = "DIR", conflicts_with_all = ["ensemble", "ground_truth"])]
        model: Option<PathBuf>,
        /// Average the predictions of several training output directories.
        #[arg(long, value_name = "DIR", num_args = 1.., conflicts_with = "ground_truth")]
        ensemble: Vec<PathBuf>,
        /// Ensemble weights; equal weights by default.
        #[arg(long, value_name = "W", num_args = 1.., requires = "ensemble")]
        weights: Vec<f64>,
        /// Emit the ground truth as the prediction.
        #[arg(long)]
        ground_truth: bool,
        /// Blend in the flow of a 180° rotated pass.
        #[arg(long)]
        tta: bool,
        #[arg(long, default_value_t = occflow::inference::TTA_WEIGHT, requires = "tta")]
        tta_weight: f64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// Output archive path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a prediction archive against a data split.
    #[command(after_help = "Config keys read: none; the grid comes from the archive.")]
    Eval {
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long, default_value_t = occflow::metrics::DEFAULT_THRESHOLDS)]
        thresholds: usize,
        /// Append the per-waypoint table.
        #[arg(long)]
        per_waypoint: bool,
        /// Also write the report to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Render per-waypoint occupancy and flow images for one scenario.
    #[command(after_help = "Config keys read: none; the grid comes from the archive.")]
    Viz {
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        #[arg(long, value_name = "ID")]
        scenario: String,
        /// Occupancy score threshold.
        #[arg(long, default_value_t = 0.4)]
        threshold: f32,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn keys_help(prefixes: &[&str]) -> String {
    let keys: Vec<String> = ExperimentConfig::default().keys().into_iter().filter(|k| prefixes.iter().any(|p| k.starts_with(p))).collect();
    format!("Config keys read:\n  {}", keys.join("\n  "))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Numerical(_) => "numerical",
        Error::Shape(_) => "shape",
        Error::Io(_) => "io",
        Error::Serde(_) => "format",
        Error::Data(_) => "data",
    }
}

fn run(cli: Cli) -> occflow::Result<()> {
    match cli.command {
        Command::GenData { cfg, seed, out, force } => commands::gen_data(&cfg, seed, &out, force),
        Command::Train { cfg, data, seed, out, force, dry_run } => commands::train(&cfg, &data, seed, &out, force, dry_run),
        Command::Predict { cfg, data, split, model, ensemble, weights, ground_truth, tta, tta_weight, batch_size, out, force } => {
            let source = if ground_truth {
                commands::Source::GroundTruth
            } else if !ensemble.is_empty() {
                commands::Source::Ensemble(ensemble, weights)
            } else {
                commands::Source::Model(model.ok_or_else(|| Error::Config("one of --model, --ensemble or --ground-truth is required".into()))?)
            };
            let tta_weight = if tta { tta_weight } else { 0.0 };
            commands::predict(&commands::PredictArgs { cfg, data, split, source, tta_weight, batch_size, out, force })
        }
        Command::Eval { pred, data, split, thresholds, per_waypoint, out } => commands::eval(&pred, &data, split, thresholds, per_waypoint, out.as_deref()),
        Command::Viz { pred, scenario, threshold, out, force } => viz::render(&pred, &scenario, threshold, &out, force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} message={:?}", kind(&e), msg);
            ExitCode::from(exit_code(&e))
        }
    }
}
