//! One binary for the whole toolkit: model inspection, parameter/FLOP
//! analysis, schedule resolution, training, architecture search, and metrics
//! export.
//!
//! Exit codes are a stable contract: 0 on success, 1 when arguments or
//! configuration fail validation (including usage errors), 2 when the work
//! itself fails at runtime.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::Failure;

#[derive(Parser)]
#[command(name = "effnetv2", version, about = "EfficientNetV2 toolkit: inspect, analyze, schedule, train, search")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the stage table of a preset or an architecture file
    Inspect(InspectArgs),
    /// Count parameters and FLOPs (multiply-accumulates) of an architecture
    Count(CountArgs),
    /// Resolve a progressive training plan and print it
    Schedule(ScheduleArgs),
    /// Train per a run-config file; writes metrics CSV, checkpoint, summary
    Train(TrainArgs),
    /// Random architecture search around a backbone
    Nas(NasArgs),
    /// Re-emit a metrics CSV as JSON or CSV
    Export(ExportArgs),
}

#[derive(Args)]
pub struct InspectArgs {
    /// Preset name (see --help for the list) or a JSON architecture file
    #[arg(value_name = "ARCH")]
    pub arch: String,
    /// Classifier width used when ARCH is a preset name
    #[arg(long, default_value_t = 1000)]
    pub classes: u32,
    /// Emit the architecture as JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct CountArgs {
    #[arg(value_name = "ARCH")]
    pub arch: String,
    #[arg(long, default_value_t = 1000)]
    pub classes: u32,
    /// Resolution to count FLOPs at; defaults to the architecture's own
    #[arg(long)]
    pub image_size: Option<u32>,
    /// Emit the report as JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct ScheduleArgs {
    /// Named schedule preset: v2-s, v2-m, v2-l
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Run-config file whose schedule section to resolve
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of progressive stages (with --preset)
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    /// Step budget to split across stages (with --preset)
    #[arg(long, default_value_t = 1000)]
    pub total_steps: u64,
    /// Pin regularization at its maximum instead of ramping it with size
    #[arg(long)]
    pub vanilla: bool,
    /// Emit the resolved plan as JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run-config file (JSON; see the docs for the schema)
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's epoch count
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Output directory (else config, else $EFFNETV2_OUTPUT_DIR, else ./runs)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct NasArgs {
    /// Candidates to sample and evaluate
    #[arg(long, default_value_t = 32)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training epochs per candidate
    #[arg(long, default_value_t = 3)]
    pub epochs: u32,
    /// Image size for the short training runs
    #[arg(long, default_value_t = 64)]
    pub image_size: u32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Backbone the space is built around: preset name or architecture file
    #[arg(long, default_value = "tiny")]
    pub backbone: String,
    #[arg(long, default_value_t = 10)]
    pub classes: u32,
    /// Layer-count slack per stage around the backbone
    #[arg(long, default_value_t = 1)]
    pub layer_delta: u32,
    /// Directory with CIFAR-10 binary batches; default is synthetic data
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic training images (ignored with --data)
    #[arg(long, default_value_t = 2048)]
    pub train_images: usize,
    /// Synthetic held-out images (ignored with --data)
    #[arg(long, default_value_t = 512)]
    pub eval_images: usize,
    /// Output directory (else $EFFNETV2_OUTPUT_DIR, else ./runs)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    /// Metrics CSV written by `train`
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportFormat::Json)]
    pub format: ExportFormat,
    /// Destination file; JSON defaults to stdout, CSV requires a path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage problem and exits like a validation failure.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Inspect(a) => commands::inspect(&a),
        Cmd::Count(a) => commands::count(&a),
        Cmd::Schedule(a) => commands::schedule(&a),
        Cmd::Train(a) => commands::train(&a),
        Cmd::Nas(a) => commands::nas(&a),
        Cmd::Export(a) => commands::export(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
