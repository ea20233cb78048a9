//! Quantizes a discretized Laplacian residual pmf at every tau and shows how
//! alphabet size and entropy shrink.
//!
//!     cargo run --example quantizer_entropy -- [SCALE]

use nllc::quantizer::{entropy_bits, quantize_pmf, quantize_residual, Pmf, Tau, RESIDUAL_MAX, RESIDUAL_MIN};

fn main() -> anyhow::Result<()> {
    let scale: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(4.0);
    let mass: Vec<f64> = (RESIDUAL_MIN..=RESIDUAL_MAX).map(|r| (-(f64::from(r)).abs() / scale).exp()).collect();
    let total: f64 = mass.iter().sum();
    let p = Pmf::contiguous(RESIDUAL_MIN, mass.into_iter().map(|m| m / total).collect())?;

    println!("tau  symbols  entropy  q(-7..=7)");
    for tau in Tau::all() {
        let q = quantize_pmf(&p, tau)?;
        let sample: Vec<String> = (-7..=7).map(|r| quantize_residual(r, tau).to_string()).collect();
        println!("{:3}  {:7}  {:7.4}  {}", tau.get(), q.len(), entropy_bits(&q), sample.join(" "));
    }
    Ok(())
}
