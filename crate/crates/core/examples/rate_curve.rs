//! Prints the rate curve (every tau and inference mode) for a directory of
//! images as CSV.
//!
//!     cargo run --release --example rate_curve -- [DIR] [WEIGHTS.nllw]

use std::path::{Path, PathBuf};

use nllc::cli::{rate_curve, write_rate_curve_csv};
use nllc::imageio::load_dir;
use nllc::model::ModelWeights;
use nllc::pipeline::Codec;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus/test"));
    let weights = match args.next() {
        Some(p) => ModelWeights::load(Path::new(&p))?,
        None => ModelWeights::init(0),
    };
    let rows = rate_curve(&Codec::new(&weights)?, &load_dir(&dir)?)?;
    write_rate_curve_csv(&mut std::io::stdout().lock(), &rows)?;
    Ok(())
}
