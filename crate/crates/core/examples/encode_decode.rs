//! Encodes one image at every tau, decodes each container from its bytes and
//! checks the error bound.
//!
//!     cargo run --release --example encode_decode -- [IMAGE] [WEIGHTS.nllw]

use std::path::{Path, PathBuf};

use nllc::imageio::load_image;
use nllc::model::ModelWeights;
use nllc::pipeline::{verify, Codec, CodedContainer};
use nllc::quantizer::Tau;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let input = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus/test/chelsea_0.ppm"));
    let weights = match args.next() {
        Some(p) => ModelWeights::load(Path::new(&p))?,
        None => ModelWeights::init(0),
    };
    let x = load_image(&input)?;
    let codec = Codec::new(&weights)?;

    println!("tau  bytes  bpsp_total  bpsp_residual  psnr    linf");
    for tau in Tau::all() {
        let e = codec.encode(&x, tau, true)?;
        let bytes = e.container.to_bytes();
        let back = codec.decode(&CodedContainer::from_bytes(&bytes)?)?;
        let v = verify(&x, &back, tau)?;
        anyhow::ensure!(v.pass && back == e.reconstruction, "tau {} failed", tau.get());
        println!(
            "{:3}  {:5}  {:10.3}  {:13.3}  {:6.2}  {}",
            tau.get(),
            bytes.len(),
            e.report.bpsp_total,
            e.report.bpsp_residual,
            v.psnr,
            v.linf
        );
    }
    Ok(())
}
