//! Codes a geometric source with the range coder and compares the output
//! length to the self-information under the frequency table.
//!
//!     cargo run --release --example range_coder -- [N] [RATIO]

use nllc::coder::{freq_table_from_masses, RangeDecoder, RangeEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100_000);
    let ratio: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.8);

    let mut mass: Vec<f64> = (0..64).map(|i| ratio.powi(i)).collect();
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    let table = freq_table_from_masses(&mass)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let symbols: Vec<usize> = (0..n)
        .map(|_| {
            let mut u: f64 = rng.gen();
            mass.iter().position(|&m| {
                u -= m;
                u < 0.0
            }).unwrap_or(mass.len() - 1)
        })
        .collect();

    let mut enc = RangeEncoder::new();
    let mut bits = 0.0;
    for &s in &symbols {
        enc.encode(&table, s);
        bits += table.bits(s);
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes)?;
    for &s in &symbols {
        anyhow::ensure!(dec.decode(&table)? == s, "decoder diverged");
    }
    println!("{n} symbols -> {} bytes", bytes.len());
    println!("self-information {bits:.0} bits, coded {} bits, overhead {:.1} bits", bytes.len() * 8, bytes.len() as f64 * 8.0 - bits);
    Ok(())
}
