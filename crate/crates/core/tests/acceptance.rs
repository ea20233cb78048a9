//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::time::Instant;

use common::reference;
use nllc::coder::{freq_table_from_masses, RangeDecoder, RangeEncoder};
use nllc::imageio::Image;
use nllc::lossy::BlockDctCodec;
use nllc::model::weights::{is_causal_ctx_index, COND_TAUS};
use nllc::model::{backward, bias_correction_loss, extract_context, extract_feature, nll_bits, LossSelection, ModelWeights, Param, Sample};
use nllc::pipeline::{verify, Codec, CodedContainer, EncodeReport, InferenceMode};
use nllc::quantizer::{entropy_bits, quantize_pmf, quantize_residual, Pmf, ResidualPlane, Tau, RESIDUAL_MAX, RESIDUAL_MIN};
use nllc::trainer::{heldout_bpsp, logistic_baseline_bpsp, moment_matched_scale, residuals_of, train_on_images, train_step, Checkpoint, StepMetrics, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

struct Coded {
    name: String,
    natural: bool,
    tau: Tau,
    report: EncodeReport,
    payload_bits: f64,
    linf: u8,
    exact: bool,
}

fn train_weights() -> ModelWeights {
    let cfg = TrainConfig { steps: 2000, patch_size: 32, batch_size: 4, learning_rate: 1e-3, seed: 1, ..TrainConfig::default() };
    let images: Vec<Image> = common::natural("train").into_iter().map(|(_, i)| i).collect();
    train_on_images(&images, Checkpoint::fresh(&cfg), &BlockDctCodec::default(), |_, _| {}).expect("training").weights
}

fn encode_corpus(codec: &Codec, weights: &ModelWeights) -> Vec<Coded> {
    let natural = common::natural("test").len();
    let fresh = Codec::new(weights).expect("decoder");
    let mut out = Vec::new();
    for (i, (name, x)) in common::mixed().into_iter().enumerate() {
        for tau in Tau::all() {
            let e = codec.encode(&x, tau, true).expect("encode");
            let bytes = e.container.to_bytes();
            let back = fresh.decode(&CodedContainer::from_bytes(&bytes).expect("parse")).expect("decode");
            let v = verify(&x, &back, tau).expect("verify");
            out.push(Coded {
                name: name.clone(),
                natural: i < natural,
                tau,
                payload_bits: 8.0 * e.container.residual_payload.len() as f64,
                report: e.report,
                linf: v.linf,
                exact: back == x,
            });
        }
    }
    out
}

fn linf_bound(coded: &[Coded]) -> Outcome {
    let bad: Vec<String> = coded.iter().filter(|c| c.linf > c.tau.get()).map(|c| format!("{}@{}", c.name, c.tau.get())).collect();
    let images = coded.len() / 6;
    outcome(bad.is_empty(), if bad.is_empty() { format!("{images} images x 6 tau") } else { format!("violations: {}", bad.join(" ")) })
}

fn lossless(coded: &[Coded]) -> Outcome {
    let zero: Vec<&Coded> = coded.iter().filter(|c| c.tau.get() == 0).collect();
    let bad = zero.iter().filter(|c| !c.exact).count();
    outcome(bad == 0, format!("{}/{} bit-exact", zero.len() - bad, zero.len()))
}

fn quantizer_exhaustive() -> Outcome {
    let mut bad = 0;
    for tau in Tau::all() {
        for r in RESIDUAL_MIN..=RESIDUAL_MAX {
            let q = quantize_residual(r, tau);
            if (r - q).abs() > i32::from(tau.get()) || quantize_residual(q, tau) != q {
                bad += 1;
            }
        }
    }
    outcome(bad == 0, format!("511 x 6 pairs, {bad} failures"))
}

fn random_pmf(rng: &mut ChaCha8Rng) -> Pmf {
    let n = (RESIDUAL_MAX - RESIDUAL_MIN + 1) as usize;
    let sharp = rng.gen_range(0.1..8.0);
    let mut mass: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powf(sharp)).collect();
    if rng.gen_bool(0.3) {
        for m in mass.iter_mut() {
            if rng.gen_bool(0.7) {
                *m = 0.0;
            }
        }
        mass[rng.gen_range(0..n)] = 1.0;
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    Pmf::contiguous(RESIDUAL_MIN, mass).unwrap()
}

fn pmf_entropy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_gain, mut worst_mass) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..1000 {
        let p = random_pmf(&mut rng);
        let h = entropy_bits(&p);
        for tau in Tau::all() {
            let q = quantize_pmf(&p, tau).unwrap();
            worst_gain = worst_gain.max(entropy_bits(&q) - h);
            worst_mass = worst_mass.max((q.total() - p.total()).abs());
        }
    }
    outcome(
        worst_gain <= 1e-9 && worst_mass <= 1e-12,
        format!("1000 pmfs x 6 tau, max entropy change {worst_gain:+.2e}, max mass drift {worst_mass:.1e}"),
    )
}

fn gradients() -> Outcome {
    const H: f64 = 1e-3;
    let mut worst: f64 = 0.0;
    let mut covered = vec![false; Param::ALL.len()];
    let configs = 20;
    for seed in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (w, h) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let img = common::random_image(&mut rng, w, h);
        let amp = rng.gen_range(2..=40);
        let r = ResidualPlane::new(w, h, (0..w * h * 3).map(|_| rng.gen_range(-amp..=amp)).collect()).unwrap();
        let tau = Tau::new(rng.gen_range(1..=5)).unwrap();
        let wt = reference::randomized(500 + seed, 0.25);
        let loss = |m: &ModelWeights, conditional: bool| {
            let u = extract_feature(&img, m);
            if conditional {
                bias_correction_loss(&r, &r.quantize(tau), &u, m, tau).unwrap()
            } else {
                nll_bits(&r, &u, &extract_context(&r, m), m, None).unwrap()
            }
        };
        let sample = Sample { lossy: &img, residual: &r, bias_tau: Some(tau) };
        let (_, g) = backward(LossSelection::Both, &[sample], &wt).unwrap();
        for &p in Param::ALL {
            let i = loop {
                let i = rng.gen_range(0..p.len());
                let per_tau = p.shape()[0] == COND_TAUS && p.shape().len() == 2;
                let live = !per_tau || usize::from(tau.get()) - 1 == i / p.shape()[1];
                if live && (p != Param::CtxW || is_causal_ctx_index(i)) {
                    break i;
                }
            };
            let mut plus = wt.clone();
            plus[p][i] += H;
            let mut minus = wt.clone();
            minus[p][i] -= H;
            let fd = (loss(&plus, p.is_conditional()) - loss(&minus, p.is_conditional())) / (2.0 * H);
            let an = g[p][i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            covered[p.index()] = true;
        }
    }
    let all = covered.iter().all(|&c| c);
    outcome(worst < 1e-4 && all, format!("{configs} configs, {} tensors, max rel err {worst:.2e}", Param::ALL.len()))
}

fn coder_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 257;
    let mass: Vec<f64> = (0..n).map(|i| (-(i as f64 - 128.0).powi(2) / 800.0).exp() + 1e-4).collect();
    let total: f64 = mass.iter().sum();
    let mass: Vec<f64> = mass.iter().map(|m| m / total).collect();
    let table = freq_table_from_masses(&mass).unwrap();
    let cdf: Vec<f64> = mass.iter().scan(0.0, |acc, m| { *acc += m; Some(*acc) }).collect();
    let symbols: Vec<usize> = (0..1_000_000)
        .map(|_| {
            let u: f64 = rng.gen();
            cdf.partition_point(|&c| c < u).min(n - 1)
        })
        .collect();
    let mut enc = RangeEncoder::new();
    let mut si = 0.0;
    for &s in &symbols {
        enc.encode(&table, s);
        si += table.bits(s);
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes).unwrap();
    let exact = symbols.iter().all(|&s| dec.decode(&table).unwrap() == s);
    let bits = 8.0 * bytes.len() as f64;
    let limit = si * 1.001 + 64.0;
    outcome(exact && bits <= limit, format!("roundtrip {}, {bits:.0} bits vs self-information {si:.0} (limit {limit:.0})", if exact { "exact" } else { "MISMATCH" }))
}

fn rate_monotone(coded: &[Coded]) -> Outcome {
    let natural: Vec<&Coded> = coded.iter().filter(|c| c.natural).collect();
    let mut bad = Vec::new();
    let names: Vec<&String> = natural.iter().filter(|c| c.tau.get() == 0).map(|c| &c.name).collect();
    let mut mean = [0.0; 6];
    for name in &names {
        let rates: Vec<f64> = natural.iter().filter(|c| &c.name == *name).map(|c| c.report.bpsp_residual).collect();
        for (m, r) in mean.iter_mut().zip(&rates) {
            *m += r / names.len() as f64;
        }
        if rates.windows(2).any(|w| w[1] >= w[0]) {
            bad.push(name.as_str());
        }
    }
    let drop = 1.0 - mean[1] / mean[0];
    let rates: Vec<String> = mean.iter().map(|m| format!("{m:.3}")).collect();
    outcome(
        bad.is_empty() && drop >= 0.25,
        format!("mean residual bpsp tau 0..5: {}; tau=1 saves {:.1}%{}", rates.join(" "), 100.0 * drop, if bad.is_empty() { String::new() } else { format!("; not decreasing: {}", bad.join(" ")) }),
    )
}

fn bias_correction(codec: &Codec) -> Outcome {
    let images = common::natural("test");
    let mut ok = true;
    let mut parts = Vec::new();
    for tau in Tau::conditional() {
        let mean = |mode| images.iter().map(|(_, x)| codec.measure(x, tau, mode).unwrap().bpsp()).sum::<f64>() / images.len() as f64;
        let (ideal, corrected, uncorrected) = (mean(InferenceMode::Ideal), mean(InferenceMode::Corrected), mean(InferenceMode::Uncorrected));
        ok &= ideal <= corrected && corrected <= uncorrected;
        if tau.get() >= 2 {
            ok &= corrected < uncorrected;
        }
        parts.push(format!("tau={} {ideal:.3}/{corrected:.3}/{uncorrected:.3}", tau.get()));
    }
    outcome(ok, format!("ideal/corrected/uncorrected: {}", parts.join(", ")))
}

fn coder_consistency(coded: &[Coded]) -> (Outcome, Outcome) {
    let mut model_bad = Vec::new();
    let mut table_bad = 0;
    let mut table_excess: f64 = f64::NEG_INFINITY;
    for c in coded {
        let si = c.report.self_information_bits;
        if c.payload_bits < si - 1.0 || c.payload_bits > si + 64.0 + 0.005 * si {
            model_bad.push(format!("{}@{} {:.0}/{:.0}", c.name, c.tau.get(), c.payload_bits, si));
        }
        let t = c.report.table_bits;
        if c.payload_bits < t - 1.0 || c.payload_bits > t + 64.0 + 0.005 * t {
            table_bad += 1;
        }
        table_excess = table_excess.max(c.payload_bits - t);
    }
    let n = model_bad.len();
    let shown: Vec<String> = model_bad.into_iter().take(6).collect();
    (
        outcome(n == 0, format!("{n}/{} encodes outside [SI-1, SI+64+0.5%] under the model pmf{}", coded.len(), if n == 0 { String::new() } else { format!(": {} ...", shown.join(", ")) })),
        outcome(table_bad == 0, format!("{table_bad}/{} outside the same bounds under the coded tables; max payload excess {table_excess:.0} bits", coded.len())),
    )
}

fn trainer_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let patch = common::random_image(&mut rng, 8, 8);
    let cfg = TrainConfig { patch_size: 8, batch_size: 1, steps: 200, learning_rate: 1e-3, augment: false, seed: 1, ..TrainConfig::default() };
    let mut losses = Vec::new();
    train_on_images(std::slice::from_ref(&patch), Checkpoint::fresh(&cfg), &BlockDctCodec::default(), |m, _| losses.push(m.main_bits)).unwrap();
    let avg: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    let monotone = avg.windows(2).all(|w| w[1] < w[0]);

    let images: Vec<Image> = common::natural("train").into_iter().take(6).map(|(_, i)| i).collect();
    let cfg = TrainConfig { patch_size: 16, batch_size: 2, steps: 20, learning_rate: 1e-3, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut rows: Vec<StepMetrics> = Vec::new();
        let ck = train_on_images(&images, Checkpoint::fresh(&cfg), &BlockDctCodec::default(), |m, _| rows.push(*m)).unwrap();
        (rows, ck)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    let reproducible = a == b && ca.weights == cb.weights;
    let mut ck = Checkpoint::fresh(&cfg);
    for _ in 0..10 {
        train_step(&images, &mut ck, &BlockDctCodec::default()).unwrap();
    }
    let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let resumed = train_on_images(&images, ck, &BlockDctCodec::default(), |_, _| {}).unwrap();
    let resume_ok = resumed.weights == ca.weights && resumed.adam == ca.adam;
    outcome(
        monotone && reproducible && resume_ok,
        format!(
            "overfit moving average {:.3} -> {:.3} ({}), reproducible {reproducible}, resume {resume_ok}",
            avg[0],
            avg[avg.len() - 1],
            if monotone { "monotone" } else { "NOT monotone" }
        ),
    )
}

fn report(results: &mut Vec<(String, Outcome)>, name: &str, start: Instant, o: Outcome) {
    println!("{:<32} {}  {}  [{:.1}s]", name, if o.passed { "PASS" } else { "FAIL" }, o.detail, start.elapsed().as_secs_f64());
    results.push((name.to_string(), o));
}

fn main() {
    let mut results = Vec::new();
    let t = Instant::now();
    report(&mut results, "3  quantizer exhaustive", t, quantizer_exhaustive());
    let t = Instant::now();
    report(&mut results, "4  pmf quantization entropy", t, pmf_entropy());
    let t = Instant::now();
    report(&mut results, "5  gradient correctness", t, gradients());
    let t = Instant::now();
    report(&mut results, "6  coder fidelity", t, coder_fidelity());
    let t = Instant::now();
    report(&mut results, "10 trainer sanity", t, trainer_sanity());

    let t = Instant::now();
    let weights = train_weights();
    let codec = Codec::new(&weights).expect("trained weights");
    let lossy = BlockDctCodec::default();
    let test: Vec<Image> = common::natural("test").into_iter().map(|(_, i)| i).collect();
    let heldout = residuals_of(&test, &lossy).unwrap();
    let planes: Vec<ResidualPlane> = heldout.iter().map(|(_, r)| r.clone()).collect();
    println!(
        "   training: 2000 steps in {:.0}s, held-out {:.3} bpsp vs logistic baseline {:.3}",
        t.elapsed().as_secs_f64(),
        heldout_bpsp(&weights, &heldout).unwrap(),
        logistic_baseline_bpsp(&planes, moment_matched_scale(&planes))
    );

    let t = Instant::now();
    let coded = encode_corpus(&codec, &weights);
    report(&mut results, "1  linf guarantee", t, linf_bound(&coded));
    report(&mut results, "2  lossless roundtrip", t, lossless(&coded));
    let t = Instant::now();
    report(&mut results, "7  rate monotonicity", t, rate_monotone(&coded));
    let t = Instant::now();
    report(&mut results, "8  bias correction", t, bias_correction(&codec));
    let t = Instant::now();
    let (model, table) = coder_consistency(&coded);
    report(&mut results, "9  model-vs-coder consistency", t, model);
    println!("   (info) table self-information: {}  {}", if table.passed { "within" } else { "outside" }, table.detail);

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| n.as_str()).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
