use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod config;
mod fail;
mod inspect;
mod train;

/// Polyp segmentation: train, evaluate, infer and inspect intermediate maps.
///
/// Exit codes: 0 ok, 1 internal, 2 input or ingestion, 3 checkpoint.
#[derive(Parser)]
#[command(name = "polyp-ses", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `<data>/images` + `<data>/masks`, writing checkpoints, metrics.csv and manifest.json.
    Train {
        /// TOML run configuration, or the manifest.json of an earlier run.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a training checkpoint written under the same configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the configured seed (initialization and data order).
        #[arg(long)]
        seed: Option<u64>,
        /// Drop the self-enriched semantic module; M_initial becomes the output.
        #[arg(long)]
        no_ses: bool,
        /// Replace every LGSF block with a plain 3x3 convolution.
        #[arg(long)]
        no_lgsf: bool,
        /// Backbone tag recorded in reports.
        #[arg(long)]
        backbone: Option<String>,
    },
    /// Score a checkpoint on a dataset; writes report.csv, report.txt and manifest.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Predict one image; writes an 8-bit map at the image resolution and a `_bin` twin.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image.
        #[arg(long, visible_alias = "image")]
        data: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Export feature magnitudes, partition masks and all predicted maps as PNGs.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image.
        #[arg(long, visible_alias = "image")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic image/mask set (one textured ellipse per image) in the layout `train` reads.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), fail::Failure> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            checkpoint,
            seed,
            no_ses,
            no_lgsf,
            backbone,
        } => train::run(train::TrainArgs {
            config,
            data,
            out,
            resume: checkpoint,
            seed,
            no_ses,
            no_lgsf,
            backbone,
        }),
        Command::Eval {
            checkpoint,
            data,
            out,
            threshold,
        } => inspect::eval(&checkpoint, &data, &out, threshold),
        Command::Infer {
            checkpoint,
            data,
            out,
            threshold,
        } => inspect::infer(&checkpoint, &data, &out, threshold),
        Command::Dump {
            checkpoint,
            data,
            out,
        } => inspect::dump(&checkpoint, &data, &out),
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            let samples = polyp_ses::dataset::synthetic(count, (size, size), seed);
            polyp_ses::dataset::save_dir(&out, &samples)
                .map_err(|e| fail::Failure::internal(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
