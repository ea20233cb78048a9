//! Trains the residual model on a small corpus and compares held-out rate
//! against a moment-matched single-logistic baseline.
//!
//!     cargo run --release --example train_small -- [STEPS] [BATCH] [LR] [OUT.nllw]

use std::path::PathBuf;
use std::time::Instant;

use nllc::imageio::load_dir;
use nllc::lossy::BlockDctCodec;
use nllc::trainer::{
    heldout_bpsp, logistic_baseline_bpsp, moment_matched_scale, residuals_of, train_on_images,
    Checkpoint, TrainConfig,
};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus");
    let cfg = TrainConfig {
        steps: args.first().map(|s| s.parse()).transpose()?.unwrap_or(300),
        batch_size: args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(4),
        learning_rate: args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1e-3),
        seed: 1,
        ..TrainConfig::default()
    };
    let out = args.get(3).map(PathBuf::from);

    let train: Vec<_> = load_dir(corpus.join("train"))?.into_iter().map(|(_, i)| i).collect();
    let test: Vec<_> = load_dir(corpus.join("test"))?.into_iter().map(|(_, i)| i).collect();
    let lossy = BlockDctCodec::default();
    let heldout = residuals_of(&test, &lossy)?;
    let planes: Vec<_> = heldout.iter().map(|(_, r)| r.clone()).collect();
    let baseline = logistic_baseline_bpsp(&planes, moment_matched_scale(&planes));
    println!("baseline (moment-matched logistic): {baseline:.4} bpsp");

    let start = Instant::now();
    let (mut main_avg, mut bias_avg) = (0.0, 0.0);
    let ckpt = train_on_images(&train, Checkpoint::fresh(&cfg), &lossy, |m, ck| {
        main_avg += m.main_bits;
        bias_avg += m.bias_bits;
        if ck.step % 50 == 0 {
            let held = heldout_bpsp(&ck.weights, &heldout).unwrap_or(f64::NAN);
            println!(
                "step {:5}  main {:.4}  bias {:+.4}  heldout {held:.4}  lr {:.0e}  {:.1}s",
                ck.step,
                main_avg / 50.0,
                bias_avg / 50.0,
                m.lr,
                start.elapsed().as_secs_f64()
            );
            main_avg = 0.0;
            bias_avg = 0.0;
        }
    })?;
    println!("final held-out: {:.4} bpsp", heldout_bpsp(&ckpt.weights, &heldout)?);
    if let Some(path) = out {
        ckpt.weights.save(&path)?;
        println!("weights written to {}", path.display());
    }
    Ok(())
}
