//! Trains briefly, then compares the rate of the three inference modes on
//! held-out images at each tau > 0.
//!
//!     cargo run --release --example bias_correction -- [STEPS]

use std::path::PathBuf;

use nllc::imageio::load_dir;
use nllc::lossy::BlockDctCodec;
use nllc::pipeline::{Codec, InferenceMode};
use nllc::quantizer::Tau;
use nllc::trainer::{train_on_images, Checkpoint, TrainConfig};

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(400);
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus");
    let train: Vec<_> = load_dir(corpus.join("train"))?.into_iter().map(|(_, i)| i).collect();
    let test = load_dir(corpus.join("test"))?;

    let cfg = TrainConfig { steps, batch_size: 4, learning_rate: 1e-3, seed: 1, ..TrainConfig::default() };
    let ck = train_on_images(&train, Checkpoint::fresh(&cfg), &BlockDctCodec::default(), |_, _| {})?;
    let codec = Codec::new(&ck.weights)?;

    println!("tau  ideal  corrected  uncorrected");
    for tau in Tau::conditional() {
        let mut mean = [0.0; 3];
        for (_, x) in &test {
            for (m, mode) in mean.iter_mut().zip([InferenceMode::Ideal, InferenceMode::Corrected, InferenceMode::Uncorrected]) {
                *m += codec.measure(x, tau, mode)?.bpsp() / test.len() as f64;
            }
        }
        println!("{:3}  {:5.3}  {:9.3}  {:11.3}", tau.get(), mean[0], mean[1], mean[2]);
    }
    Ok(())
}
