//! Runs the block-DCT lossy layer over a directory of images and prints its
//! rate and PSNR per image.
//!
//!     cargo run --release --example lossy_layer -- [DIR] [STEP_SCALE]

use std::path::PathBuf;

use nllc::imageio::load_dir;
use nllc::lossy::{psnr, BlockDctCodec, BlockTransformConfig, LossyCodec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus/test"));
    let scale: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1.0);

    let mut steps = *BlockTransformConfig::default().steps();
    for s in steps.iter_mut() {
        *s = ((f64::from(*s) * scale).round() as u16).max(1);
    }
    let codec = BlockDctCodec::new(BlockTransformConfig::new(steps)?);

    let (mut total_psnr, mut total_bpsp, mut n) = (0.0, 0.0, 0);
    for (name, img) in load_dir(&dir)? {
        let out = codec.encode(&img)?;
        let p = psnr(&img, &out.reconstruction);
        let bpsp = out.payload.len() as f64 * 8.0 / img.subpixel_count() as f64;
        println!("{name:<16} {}x{}  {bpsp:6.3} bpsp  {p:6.2} dB", img.width(), img.height());
        total_psnr += p;
        total_bpsp += bpsp;
        n += 1;
    }
    if n > 0 {
        println!("mean             {:6.3} bpsp  {:6.2} dB", total_bpsp / n as f64, total_psnr / n as f64);
    }
    Ok(())
}
