use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use nllc::cli;

#[derive(Parser)]
#[command(name = "nllc", version, about = "Near-lossless image codec with a bounded per-subpixel error")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress an image with maximum absolute error tau.
    Encode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=5))]
        tau: u8,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        no_bias_correction: bool,
    },
    /// Decode a container to PPM (or PNG, chosen by extension).
    Decode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Check that a reconstruction stays within tau of the original.
    Verify {
        original: PathBuf,
        reconstructed: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=5))]
        tau: u8,
    },
    /// Train the entropy model on a directory of images.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 32)]
        patch_size: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-step metrics CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write a resumable checkpoint here when done.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rates and errors for every image, tau and inference mode.
    RateCurve {
        corpus: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the embedded checks.
    Selftest {
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn run(args: Args) -> anyhow::Result<bool> {
    let mut out = std::io::stdout().lock();
    Ok(match args.cmd {
        Cmd::Encode { input, out: dst, tau, weights, no_bias_correction } => {
            cli::cmd_encode(&input, &dst, tau, weights.as_deref(), no_bias_correction, &mut out)
                .with_context(|| format!("encoding {}", input.display()))?;
            true
        }
        Cmd::Decode { input, out: dst, weights } => {
            cli::cmd_decode(&input, &dst, weights.as_deref(), &mut out)
                .with_context(|| format!("decoding {}", input.display()))?;
            true
        }
        Cmd::Verify { original, reconstructed, tau } => cli::cmd_verify(&original, &reconstructed, tau, &mut out)?,
        Cmd::Train { dataset, out: dst, steps, patch_size, batch_size, lr, seed, csv, checkpoint, resume } => {
            let a = cli::TrainArgs {
                dataset,
                out: dst,
                steps,
                patch_size,
                batch_size,
                learning_rate: lr,
                seed,
                csv,
                resume,
                checkpoint,
            };
            cli::cmd_train(&a, &mut out)?;
            true
        }
        Cmd::RateCurve { corpus, weights, csv } => {
            cli::cmd_rate_curve(&corpus, weights.as_deref(), csv.as_deref(), &mut out)?;
            true
        }
        Cmd::Selftest { weights } => cli::cmd_selftest(weights.as_deref(), &mut out)?,
    })
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
