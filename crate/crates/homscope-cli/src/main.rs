//! `homscope`: reproducible HOM depth-microscopy simulation runs.
//!
//! Every subcommand reads one JSON configuration file and writes CSV/JSON
//! artifacts into its output directory. Runs are deterministic for a fixed
//! (config, seed) pair. Exit codes: 0 success, 2 configuration error,
//! 3 data/calibration error, 4 infeasible planning target.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{DipMode, PrecisionArgs, PrecisionMode};
use config::RunConfig;

/// A failed run, carrying its contractual exit code.
#[derive(Debug)]
pub enum CliError {
    /// Malformed configuration, flags or referenced files (exit 2).
    Config(String),
    /// Simulation, calibration or estimation failure (exit 3).
    Data(String),
    /// Planning target unreachable within the configured budget (exit 4).
    Infeasible(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Infeasible(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Infeasible(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "homscope",
    about = "Two-colour entangled HOM depth microscopy: simulate, calibrate, estimate",
    version
)]
struct Cli {
    /// JSON run configuration; defaults apply for a missing file only if
    /// the flag itself is omitted.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the configured output directory.
    #[arg(short, long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an interference dip/beat trace and write dip.csv.
    Dip(DipArgs),
    /// Raster-scan a sample into depth/sigma/fringe CSVs, a 16-bit PGM and
    /// a summary JSON.
    Image {
        /// Height-map CSV (with its JSON sidecar); defaults to the built-in
        /// KET test target.
        sample: Option<PathBuf>,
    },
    /// Precision-versus-detuning experiments; writes precision.csv and
    /// per-detuning histogram CSVs.
    Precision(PrecisionCliArgs),
    /// Estimate relative Klyshko efficiencies from a simulated large-delay
    /// run and write calibration.json.
    Calibrate {
        /// Photon pairs to spend on the calibration acquisition.
        #[arg(long)]
        pairs: u64,
    },
    /// Plan a coarse-to-fine scan for a depth prior and precision target;
    /// writes plan.json.
    Plan {
        /// Width of the prior depth interval (m).
        #[arg(long, value_name = "METERS")]
        prior_range: f64,
        /// Target depth precision (m).
        #[arg(long, value_name = "METERS")]
        target_sigma: f64,
        /// Sample refractive index for delay/depth conversion.
        #[arg(long, default_value_t = 1.58)]
        refractive_index: f64,
    },
}

#[derive(Args)]
struct DipArgs {
    /// Force the degenerate (triangular dip) model.
    #[arg(long, conflicts_with = "two_colour")]
    degenerate: bool,
    /// Force the two-colour (beat) model at the configured detuning.
    #[arg(long = "two-colour")]
    two_colour: bool,
    /// Delay range in seconds as "lo,hi"; defaults to the model's natural span.
    #[arg(long, value_name = "LO_S,HI_S", allow_hyphen_values = true)]
    delay_range: Option<String>,
    /// Number of grid points.
    #[arg(long, default_value_t = 201)]
    points: usize,
}

#[derive(Args)]
struct PrecisionCliArgs {
    /// Experiment kind.
    #[arg(long, value_parser = ["step", "single-pixel"])]
    mode: String,
    /// Comma-separated detunings in Hz, e.g. "3.4e12,7.4e12".
    #[arg(long, value_name = "HZ,HZ,...")]
    detunings: String,
    /// Pixels per step level (step mode).
    #[arg(long, default_value_t = 200)]
    pixels: usize,
    /// Repeated acquisitions per detuning (single-pixel mode).
    #[arg(long, default_value_t = 500)]
    repeats: usize,
    /// Block size for the block-statistics precision (single-pixel mode).
    #[arg(long, default_value_t = 50)]
    block: usize,
    /// Step height of the two-level target (m).
    #[arg(long, default_value_t = commands::DEFAULT_STEP_HEIGHT_M)]
    step_height: f64,
    /// Sample refractive index for delay/depth conversion.
    #[arg(long, default_value_t = 1.58)]
    refractive_index: f64,
}

fn parse_float_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Config(format!("bad number {s:?}: {e}")))
        })
        .collect()
}

fn parse_range(text: &str) -> Result<(f64, f64), CliError> {
    let values = parse_float_list(text)?;
    match values.as_slice() {
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(CliError::Config(format!(
            "expected \"lo,hi\", got {text:?}"
        ))),
    }
}

fn configure_threads() {
    if let Ok(value) = std::env::var("HOMSCOPE_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let config = RunConfig::default();
            config.validate()?;
            config
        }
    };
    if let Some(dir) = cli.output_dir {
        config.output_dir = dir;
    }

    match cli.command {
        Command::Dip(args) => {
            let mode = if args.degenerate {
                DipMode::Degenerate
            } else if args.two_colour {
                DipMode::TwoColour
            } else {
                DipMode::FromConfig
            };
            let range = args.delay_range.as_deref().map(parse_range).transpose()?;
            commands::cmd_dip(&config, mode, range, args.points)
        }
        Command::Image { sample } => commands::cmd_image(&config, sample.as_deref()),
        Command::Precision(args) => {
            let mode = match args.mode.as_str() {
                "step" => PrecisionMode::Step,
                _ => PrecisionMode::SinglePixel,
            };
            let detunings = parse_float_list(&args.detunings)?;
            commands::cmd_precision(
                &config,
                &PrecisionArgs {
                    mode,
                    detunings_hz: detunings,
                    pixels_per_step: args.pixels,
                    repeats: args.repeats,
                    block_size: args.block,
                    step_height_m: args.step_height,
                    refractive_index: args.refractive_index,
                },
            )
        }
        Command::Calibrate { pairs } => commands::cmd_calibrate(&config, pairs),
        Command::Plan {
            prior_range,
            target_sigma,
            refractive_index,
        } => commands::cmd_plan(&config, prior_range, target_sigma, refractive_index),
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(artifact) => {
            println!("wrote {}", artifact.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
