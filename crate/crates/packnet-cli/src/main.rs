//! `packnet` — train, evaluate, and probe self-supervised depth models
//! from the command line.

mod chart;
mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::TrainOverrides;

/// One error type for the binary: everything renders as a single line on
/// stderr and a nonzero exit code.
#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn msg(text: impl Into<String>) -> Self {
        CliError(text.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

impl From<packnet::error::Error> for CliError {
    fn from(e: packnet::error::Error) -> Self {
        CliError(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "packnet", version, about = "Self-supervised monocular depth and ego-motion")]
struct Cli {
    /// JSON run configuration (see the repository README for the schema).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed; overrides the configuration file's.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the self-supervised training loop over a configured data source.
    Train {
        /// Directory receiving the checkpoint, effective config, and log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score predictions against ground-truth depth rasters.
    Evaluate {
        /// Dataset directory whose depth/ subdirectory holds ground truth.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to run inference with (exclusive with --predictions).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of precomputed 16-bit depth rasters, one per frame.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Directory receiving per-frame, aggregate, and per-bin reports.
        #[arg(long)]
        out: PathBuf,
        /// Keep/override the protocol's lower depth cap in meters.
        #[arg(long)]
        min_depth: Option<f64>,
        /// Keep/override the protocol's upper depth cap in meters.
        #[arg(long)]
        max_depth: Option<f64>,
        /// Median-rescale predictions before scoring (true for
        /// scale-ambiguous models, false for metric ones).
        #[arg(long)]
        median_scaling: Option<bool>,
        /// Comma-separated bin edges in meters, e.g. "0,10,25,50,80"; each
        /// consecutive pair becomes one range report.
        #[arg(long, value_parser = commands::evaluate::parse_bins)]
        bins: Option<commands::evaluate::BinRanges>,
        /// Evaluate with the checkpoint at HEIGHTxWIDTH instead of the
        /// checkpoint's training resolution.
        #[arg(long, value_parser = config::parse_resolution)]
        resolution: Option<(usize, usize)>,
    },
    /// Predict depth rasters for standalone images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory receiving one 16-bit depth raster per input image.
        #[arg(long)]
        out: PathBuf,
        /// Network input resolution as HEIGHTxWIDTH; defaults to the
        /// checkpoint's training resolution, then to the image size.
        #[arg(long, value_parser = config::parse_resolution)]
        resolution: Option<(usize, usize)>,
        /// Input images (PNG).
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Compare a packing/unpacking autoencoder against a pooling/bilinear
    /// baseline on one image and report both reconstruction errors.
    #[command(name = "reconstruct-demo")]
    ReconstructDemo {
        /// Image to reconstruct; sides must be even.
        #[arg(long)]
        image: PathBuf,
        /// Optimizer steps for each autoencoder.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Adam learning rate for both autoencoders.
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render training-log curves and binned-evaluation charts as PNGs.
    Plot {
        /// Line-delimited training log written by `train`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Binned evaluation report written by `evaluate`.
        #[arg(long)]
        bins: Option<PathBuf>,
        /// Directory receiving the chart images.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { out, resume, overrides } => {
            commands::train::run(cli.config.as_deref(), cli.seed, &out, resume.as_deref(), &overrides)
        }
        Command::Evaluate {
            data,
            checkpoint,
            predictions,
            out,
            min_depth,
            max_depth,
            median_scaling,
            bins,
            resolution,
        } => commands::evaluate::run(commands::evaluate::Request {
            config: cli.config.as_deref(),
            data: &data,
            checkpoint: checkpoint.as_deref(),
            predictions: predictions.as_deref(),
            out: &out,
            min_depth,
            max_depth,
            median_scaling,
            bins: bins.map(|b| b.0),
            resolution,
        }),
        Command::Infer { checkpoint, out, resolution, images } => {
            commands::infer::run(&checkpoint, &out, resolution, &images)
        }
        Command::ReconstructDemo { image, steps, lr, out } => {
            commands::reconstruct::run(&image, steps, lr, cli.seed.unwrap_or(42), out.as_deref())
        }
        Command::Plot { log, bins, out } => {
            commands::plot::run(log.as_deref(), bins.as_deref(), &out)
        }
    }
}
