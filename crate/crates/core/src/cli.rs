//! Command implementations behind the `nllc` binary. Each takes plain
//! arguments and a writer for its standard output.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coder::{build_freq_table, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::imageio::{load_dir, load_image, save_image, Image};
use crate::lossy::{check_conformance, BlockDctCodec, LossyCodec, MeanColorCodec};
use crate::model::{
    backward, extract_context, extract_feature, nll_bits, LossSelection, ModelWeights, Param, Sample,
};
use crate::pipeline::{verify, Codec, CodedContainer, EncodeReport, InferenceMode};
use crate::quantizer::{
    entropy_bits, quantize_pmf, quantize_residual, Pmf, ResidualPlane, Tau, RESIDUAL_MAX,
    RESIDUAL_MIN, RESIDUAL_SYMBOLS,
};
use crate::trainer::{train_on_images, write_metrics_csv, Checkpoint, StepMetrics, TrainConfig};

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_weights(path: Option<&Path>) -> Result<ModelWeights> {
    match path {
        Some(p) => ModelWeights::load(p),
        None => Ok(ModelWeights::init(0)),
    }
}

fn fmt_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p:.4}")
    }
}

pub fn print_report(out: &mut dyn Write, r: &EncodeReport) -> Result<()> {
    writeln!(
        out,
        "bpsp_total={:.6}\nbpsp_lossy={:.6}\nbpsp_residual={:.6}\npsnr_lossy={}\npsnr={}\nlinf={}",
        r.bpsp_total,
        r.bpsp_lossy,
        r.bpsp_residual,
        fmt_psnr(r.psnr_lossy),
        fmt_psnr(r.psnr),
        r.linf
    )
    .map_err(out_err)
}

/// Encodes `input` into a container at `output`. Without `weights` the
/// seed-0 initialization is used.
pub fn cmd_encode(input: &Path, output: &Path, tau: u8, weights: Option<&Path>, no_bias_correction: bool, out: &mut dyn Write) -> Result<EncodeReport> {
    let tau = Tau::new(tau)?;
    let w = load_weights(weights)?;
    let x = load_image(input)?;
    let e = Codec::new(&w)?.encode(&x, tau, !no_bias_correction)?;
    std::fs::write(output, e.container.to_bytes()).map_err(|err| Error::io(output, err))?;
    print_report(out, &e.report)?;
    Ok(e.report)
}

/// Decodes a container to a PPM (or PNG, by extension) image.
pub fn cmd_decode(input: &Path, output: &Path, weights: Option<&Path>, out: &mut dyn Write) -> Result<Image> {
    let bytes = std::fs::read(input).map_err(|e| Error::io(input, e))?;
    let c = CodedContainer::from_bytes(&bytes)?;
    let img = Codec::new(&load_weights(weights)?)?.decode(&c)?;
    save_image(&img, output)?;
    writeln!(out, "width={}\nheight={}\ntau={}", img.width(), img.height(), c.tau).map_err(out_err)?;
    Ok(img)
}

/// Compares two images; returns whether the ℓ∞ error is within τ.
pub fn cmd_verify(original: &Path, reconstructed: &Path, tau: u8, out: &mut dyn Write) -> Result<bool> {
    let tau = Tau::new(tau)?;
    let v = verify(&load_image(original)?, &load_image(reconstructed)?, tau)?;
    writeln!(out, "linf={}\npsnr={}\npass={}", v.linf, fmt_psnr(v.psnr), v.pass).map_err(out_err)?;
    Ok(v.pass)
}

pub struct TrainArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub steps: u64,
    pub patch_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub csv: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains and writes the weights to `args.out`; optionally writes the
/// metrics stream and a resumable checkpoint.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<Checkpoint> {
    let images: Vec<Image> = load_dir(&args.dataset)?.into_iter().map(|(_, i)| i).collect();
    if images.is_empty() {
        return Err(Error::EmptyDataset(args.dataset.display().to_string()));
    }
    let cfg = TrainConfig {
        steps: args.steps,
        patch_size: args.patch_size,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
        dataset: Some(args.dataset.clone()),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let start = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config_hash != cfg.hash() {
                return Err(Error::InvalidArgument("checkpoint was made with a different configuration".into()));
            }
            ck
        }
        None => Checkpoint::fresh(&cfg),
    };
    let mut rows: Vec<StepMetrics> = Vec::new();
    let every = (cfg.steps / 20).max(1);
    let mut io_err = None;
    let ckpt = train_on_images(&images, start, &BlockDctCodec::default(), |m, ck| {
        rows.push(*m);
        if ck.step % every == 0 || ck.step == cfg.steps {
            if let Err(e) = writeln!(out, "step={} main_bits={:.5} bias_bits={:+.5} lr={:e}", ck.step, m.main_bits, m.bias_bits, m.lr) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(out_err(e));
    }
    ckpt.weights.save(&args.out)?;
    if let Some(p) = &args.csv {
        write_metrics_csv(p, &rows)?;
    }
    if let Some(p) = &args.checkpoint {
        ckpt.save(p)?;
    }
    Ok(ckpt)
}

/// One line of the rate-curve CSV.
#[derive(Clone, PartialEq, Debug)]
pub struct RateCurveRow {
    pub image: String,
    pub tau: u8,
    /// `lossless`, `corrected`, `uncorrected` or `ideal`.
    pub mode: &'static str,
    pub bpsp_lossy: f64,
    /// Payload rate for decodable rows, model self-information for `ideal`.
    pub bpsp_residual: f64,
    pub bpsp_total: f64,
    /// Model self-information of the coded symbols.
    pub bpsp_model: f64,
    pub linf: u8,
    pub psnr: f64,
    pub decodable: bool,
}

pub const RATE_CURVE_HEADER: &str =
    "image,tau,mode,bpsp_lossy,bpsp_residual,bpsp_total,bpsp_model,linf,psnr,decodable";

impl RateCurveRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.image,
            self.tau,
            self.mode,
            self.bpsp_lossy,
            self.bpsp_residual,
            self.bpsp_total,
            self.bpsp_model,
            self.linf,
            fmt_psnr(self.psnr),
            self.decodable
        )
    }
}

/// Every (image, τ, mode) combination; τ = 0 yields a single `lossless` row.
/// Decodable rows are actually encoded, decoded and verified.
pub fn rate_curve(codec: &Codec, images: &[(String, Image)]) -> Result<Vec<RateCurveRow>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("rate curve needs at least one image".into()));
    }
    let mut rows = Vec::new();
    for (name, x) in images {
        for tau in Tau::all() {
            let modes: &[InferenceMode] = if tau.get() == 0 {
                &[InferenceMode::Uncorrected]
            } else {
                &[InferenceMode::Corrected, InferenceMode::Uncorrected, InferenceMode::Ideal]
            };
            for &mode in modes {
                let label = if tau.get() == 0 { "lossless" } else { mode.name() };
                let n = x.subpixel_count() as f64;
                let row = if mode.is_decodable() {
                    let e = codec.encode(x, tau, mode == InferenceMode::Corrected)?;
                    let decoded = codec.decode(&CodedContainer::from_bytes(&e.container.to_bytes())?)?;
                    if decoded != e.reconstruction {
                        return Err(Error::CorruptPayload(format!("{name}: decoder disagrees with encoder at tau {tau}")));
                    }
                    let v = verify(x, &decoded, tau)?;
                    RateCurveRow {
                        image: name.clone(),
                        tau: tau.get(),
                        mode: label,
                        bpsp_lossy: e.report.bpsp_lossy,
                        bpsp_residual: e.report.bpsp_residual,
                        bpsp_total: e.report.bpsp_total,
                        bpsp_model: e.report.self_information_bits / n,
                        linf: v.linf,
                        psnr: v.psnr,
                        decodable: true,
                    }
                } else {
                    let m = codec.measure(x, tau, mode)?;
                    let lossy = codec.lossy().reconstruct(x)?;
                    let r_hat = ResidualPlane::difference(x, &lossy)?.quantize(tau);
                    let x_hat = crate::quantizer::reconstruct(&lossy, &r_hat)?;
                    let v = verify(x, &x_hat, tau)?;
                    RateCurveRow {
                        image: name.clone(),
                        tau: tau.get(),
                        mode: label,
                        bpsp_lossy: m.bpsp_lossy,
                        bpsp_residual: m.bpsp(),
                        bpsp_total: m.bpsp_lossy + m.bpsp(),
                        bpsp_model: m.bpsp(),
                        linf: v.linf,
                        psnr: v.psnr,
                        decodable: false,
                    }
                };
                rows.push(row);
            }
        }
    }
    let order = |m: &str| ["lossless", "corrected", "uncorrected", "ideal"].iter().position(|&x| x == m);
    rows.sort_by(|a, b| (&a.image, a.tau, order(a.mode)).cmp(&(&b.image, b.tau, order(b.mode))));
    Ok(rows)
}

pub fn write_rate_curve_csv(w: &mut dyn Write, rows: &[RateCurveRow]) -> std::io::Result<()> {
    writeln!(w, "{RATE_CURVE_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Rate curve over every image in `corpus`, written as CSV to `csv` (or
/// `out` when absent).
pub fn cmd_rate_curve(corpus: &Path, weights: Option<&Path>, csv: Option<&Path>, out: &mut dyn Write) -> Result<Vec<RateCurveRow>> {
    let images = load_dir(corpus)?;
    let codec = Codec::new(&load_weights(weights)?)?;
    let rows = rate_curve(&codec, &images)?;
    match csv {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            write_rate_curve_csv(&mut f, &rows).map_err(|e| Error::io(p, e))?;
            writeln!(out, "rows={}", rows.len()).map_err(out_err)?;
        }
        None => write_rate_curve_csv(out, &rows).map_err(out_err)?,
    }
    Ok(rows)
}

/// Name and outcome of one self-test check.
#[derive(Clone, PartialEq, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, r: std::result::Result<String, String>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn random_pmf(rng: &mut ChaCha8Rng) -> Pmf {
    let sharp = rng.gen_range(0.5..8.0);
    let mut m: Vec<f64> = (0..RESIDUAL_SYMBOLS).map(|_| rng.gen::<f64>().powf(sharp)).collect();
    let total: f64 = m.iter().sum();
    m.iter_mut().for_each(|v| *v /= total);
    Pmf::contiguous(RESIDUAL_MIN, m).expect("normalized")
}

fn selftest_quantizer() -> std::result::Result<String, String> {
    for tau in Tau::all() {
        for r in RESIDUAL_MIN..=RESIDUAL_MAX {
            let q = quantize_residual(r, tau);
            if (r - q).abs() > i32::from(tau.get()) || quantize_residual(q, tau) != q {
                return Err(format!("r={r} tau={tau} gives {q}"));
            }
        }
    }
    Ok(format!("{} pairs", 511 * 6))
}

fn selftest_entropy(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..200 {
        let p = random_pmf(&mut rng);
        let h = entropy_bits(&p);
        for tau in Tau::all() {
            let q = quantize_pmf(&p, tau).map_err(|e| e.to_string())?;
            if entropy_bits(&q) > h + 1e-9 || (q.total() - p.total()).abs() > 1e-12 {
                return Err(format!("pmf {i} at tau {tau}"));
            }
        }
    }
    Ok("200 pmfs".into())
}

fn selftest_coder(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..20 {
        let pmf = random_pmf(&mut rng);
        let table = build_freq_table(&pmf).map_err(|e| e.to_string())?;
        let msg: Vec<usize> = (0..500).map(|_| rng.gen_range(0..RESIDUAL_SYMBOLS)).collect();
        let mut enc = RangeEncoder::new();
        msg.iter().for_each(|&s| enc.encode(&table, s));
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).map_err(|e| e.to_string())?;
        for &s in &msg {
            if dec.decode(&table).map_err(|e| e.to_string())? != s {
                return Err(format!("trial {trial} mismatch"));
            }
        }
    }
    Ok("20 messages".into())
}

fn probe_image(w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |x, y, c| ((x * 37 + y * 11 + c * 59) % 256) as u8)
}

fn probe_plane(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ResidualPlane {
    let data = (0..w * h * 3).map(|_| rng.gen_range(-9i16..=9)).collect();
    ResidualPlane::new(w, h, data).expect("in range")
}

fn selftest_gradients(w: &ModelWeights, seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lossy = probe_image(3, 3);
    let r = probe_plane(&mut rng, 3, 3);
    let sample = Sample { lossy: &lossy, residual: &r, bias_tau: None };
    let (_, g) = backward(LossSelection::Main, &[sample], w).map_err(|e| e.to_string())?;
    let loss = |w: &ModelWeights| -> f64 {
        let u = extract_feature(&lossy, w);
        nll_bits(&r, &u, &extract_context(&r, w), w, None).unwrap_or(f64::NAN)
    };
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for p in [Param::FeatW1, Param::CtxB, Param::EstW2, Param::HeadB] {
        let i = rng.gen_range(0..p.len());
        let mut wp = w.clone();
        wp[p][i] += h;
        let mut wm = w.clone();
        wm[p][i] -= h;
        let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
        let rel = (fd - g[p][i]).abs() / fd.abs().max(g[p][i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    if worst < 1e-4 {
        Ok(format!("max rel err {worst:.1e}"))
    } else {
        Err(format!("max rel err {worst:.1e}"))
    }
}

fn selftest_causality(w: &ModelWeights, seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (width, height) = (6, 5);
    let base = probe_plane(&mut rng, width, height);
    let ctx = extract_context(&base, w);
    for _ in 0..30 {
        let pos = rng.gen_range(0..width * height);
        let mut perturbed = base.clone();
        for j in pos..width * height {
            for c in 0..3 {
                perturbed.set(j % width, j / width, c, rng.gen_range(-9..=9));
            }
        }
        let ctx2 = extract_context(&perturbed, w);
        let (x, y) = (pos % width, pos / width);
        if ctx.at(x, y) != ctx2.at(x, y) {
            return Err(format!("context at ({x}, {y}) sees later residuals"));
        }
    }
    Ok("30 probes".into())
}

fn selftest_lossy() -> std::result::Result<String, String> {
    let images = [probe_image(13, 10), Image::filled(4, 4, [128, 128, 128])];
    check_conformance(&BlockDctCodec::default(), &images)?;
    check_conformance(&MeanColorCodec, &images)?;
    Ok("2 codecs".into())
}

fn selftest_pipeline(w: &ModelWeights) -> std::result::Result<String, String> {
    let codec = Codec::new(w).map_err(|e| e.to_string())?;
    let x = probe_image(7, 6);
    for tau in Tau::all() {
        let e = codec.encode(&x, tau, tau.get() > 0).map_err(|e| e.to_string())?;
        let back = codec.decode(&e.container).map_err(|e| e.to_string())?;
        let v = verify(&x, &back, tau).map_err(|e| e.to_string())?;
        if back != e.reconstruction || !v.pass {
            return Err(format!("tau {tau}: linf {}", v.linf));
        }
    }
    Ok("tau 0..=5".into())
}

/// Runs the embedded checks against `weights`.
pub fn selftest(weights: &ModelWeights) -> Vec<CheckResult> {
    vec![
        check("quantizer bound and idempotence", selftest_quantizer()),
        check("pmf quantization entropy", selftest_entropy(1)),
        check("range coder roundtrip", selftest_coder(2)),
        check("gradient spot-check", selftest_gradients(weights, 3)),
        check("context causality", selftest_causality(weights, 4)),
        check("lossy conformance", selftest_lossy()),
        check("pipeline roundtrip", selftest_pipeline(weights)),
    ]
}

/// Prints the self-test table; returns whether every check passed.
pub fn cmd_selftest(weights: Option<&Path>, out: &mut dyn Write) -> Result<bool> {
    let w = load_weights(weights)?;
    let results = selftest(&w);
    for r in &results {
        writeln!(out, "{:<34} {}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail).map_err(out_err)?;
    }
    Ok(results.iter().all(|r| r.passed))
}
