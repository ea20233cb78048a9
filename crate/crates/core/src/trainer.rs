//! Desk-scale training: main residual NLL plus the bias-correction loss with
//! a random τ per sample, optimized jointly with Adam.
//!
//! Randomness is drawn from a ChaCha stream selected by the step index, so a
//! run resumed from a checkpoint replays exactly what an uninterrupted run
//! would have done. Per sample the draws are, in order: image index,
//! downscale factor, crop row, crop column, τ.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio::{crop, downscale_bicubic, load_dir, Image, PatchSpec};
use crate::lossy::{BlockDctCodec, LossyCodec};
use crate::model::mixture::log_prob;
use crate::model::weights::Reader;
use crate::model::{backward, evaluate, GradientSet, LossSelection, ModelWeights, Param, Sample, K};
use crate::quantizer::{ResidualPlane, Tau};

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    /// Fraction of the final steps run at `learning_rate * decay_factor`.
    pub decay_fraction: f64,
    pub decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Inclusive τ range sampled for the bias loss.
    pub tau_min: u8,
    pub tau_max: u8,
    pub augment: bool,
    /// Smallest downscale factor; factors are uniform in `[min, 1]`.
    pub augment_min_scale: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            batch_size: 16,
            steps: 2000,
            learning_rate: 1e-4,
            decay_fraction: 0.125,
            decay_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tau_min: 1,
            tau_max: 5,
            augment: true,
            augment_min_scale: 0.6,
            seed: 0,
            dataset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.patch_size == 0 || self.batch_size == 0 {
            return bad("patch and batch size must be positive");
        }
        if !(1..=Tau::MAX).contains(&self.tau_min) || !(self.tau_min..=Tau::MAX).contains(&self.tau_max) {
            return bad("tau range must lie within 1..=5");
        }
        if !(self.learning_rate >= 0.0) || !(0.0..=1.0).contains(&self.decay_fraction) {
            return bad("learning rate must be >= 0 and decay fraction in [0, 1]");
        }
        if !(self.augment_min_scale > 0.0 && self.augment_min_scale <= 1.0) {
            return bad("augment_min_scale must lie in (0, 1]");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }

    /// Step-indexed schedule: constant, then `decay_factor` for the tail.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let tail = (self.steps as f64 * self.decay_fraction).round() as u64;
        if step >= self.steps.saturating_sub(tail) {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

/// Adam moments; stored in the weights layout.
#[derive(Clone, PartialEq, Debug)]
pub struct AdamState {
    pub m: ModelWeights,
    pub v: ModelWeights,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            m: ModelWeights::zeros(),
            v: ModelWeights::zeros(),
            t: 0,
        }
    }
}

impl AdamState {
    pub fn apply(&mut self, w: &mut ModelWeights, g: &GradientSet, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for &p in Param::ALL {
            let (m, v, gp) = (&mut self.m[p], &mut self.v[p], &g[p]);
            for i in 0..gp.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * gp[i];
                v[i] = b2 * v[i] + (1.0 - b2) * gp[i] * gp[i];
            }
            let (m, v) = (&self.m[p], &self.v[p]);
            for (i, wv) in w[p].iter_mut().enumerate() {
                *wv -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean main loss in bits per subpixel.
    pub main_bits: f64,
    /// Mean bias loss in bits per subpixel.
    pub bias_bits: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,main_bits,bias_bits,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.main_bits, self.bias_bits, self.lr)
    }
}

/// Resumable training state.
#[derive(Clone, PartialEq, Debug)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub adam: AdamState,
    /// Steps completed.
    pub step: u64,
    pub config_hash: [u8; 32],
    pub config: TrainConfig,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NLLK";
const CHECKPOINT_VERSION: u8 = 1;

impl Checkpoint {
    pub fn fresh(cfg: &TrainConfig) -> Self {
        Self {
            weights: ModelWeights::init(cfg.seed),
            adam: AdamState::default(),
            step: 0,
            config_hash: cfg.hash(),
            config: cfg.clone(),
        }
    }

    /// `"NLLK" | version | step u64 | adam t u64 | config hash [32] |
    /// config JSON (u32 length) | weights | m | v`, the last three in the
    /// weights file format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for w in [&self.weights, &self.adam.m, &self.adam.v] {
            out.extend_from_slice(&w.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let mut r = Reader { bytes, pos: 5 };
        let step = r.u64()?;
        let t = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let len = r.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::InvalidWeights(format!("checkpoint config: {e}")))?;
        if config.hash() != config_hash {
            return Err(Error::InvalidWeights("checkpoint config hash mismatch".into()));
        }
        let mut rest = &bytes[r.pos..];
        let mut blocks = Vec::with_capacity(3);
        for _ in 0..3 {
            let (w, used) = ModelWeights::read_prefix(rest)?;
            blocks.push(w);
            rest = &rest[used..];
        }
        if !rest.is_empty() {
            return Err(Error::InvalidWeights("trailing bytes after checkpoint".into()));
        }
        let v = blocks.pop().unwrap();
        let m = blocks.pop().unwrap();
        let weights = blocks.pop().unwrap();
        Ok(Self {
            weights,
            adam: AdamState { m, v, t },
            step,
            config_hash,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One training example after augmentation and the lossy layer.
struct Prepared {
    lossy: Image,
    residual: ResidualPlane,
    tau: Tau,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn prepare_batch(images: &[Image], cfg: &TrainConfig, step: u64, lossy: &dyn LossyCodec) -> Result<Vec<Prepared>> {
    let mut rng = step_rng(cfg.seed, step);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rng.gen_range(0..images.len());
        let factor = rng.gen_range(cfg.augment_min_scale..=1.0);
        let src = if cfg.augment && factor < 1.0 {
            downscale_bicubic(&images[idx], factor)?
        } else {
            images[idx].clone()
        };
        let ph = cfg.patch_size.min(src.height());
        let pw = cfg.patch_size.min(src.width());
        let row = rng.gen_range(0..=src.height() - ph);
        let col = rng.gen_range(0..=src.width() - pw);
        let tau = Tau::new(rng.gen_range(cfg.tau_min..=cfg.tau_max))?;
        let patch = if ph == pw {
            crop(&src, PatchSpec::new(row, col, ph))?
        } else {
            Image::from_fn(pw, ph, |x, y, c| src.get(col + x, row + y, c))
        };
        let x_tilde = lossy.reconstruct(&patch)?;
        let residual = ResidualPlane::difference(&patch, &x_tilde)?;
        batch.push(Prepared {
            lossy: x_tilde,
            residual,
            tau,
        });
    }
    Ok(batch)
}

/// One optimization step on the batch drawn for `ckpt.step`; advances the
/// checkpoint in place.
pub fn train_step(images: &[Image], ckpt: &mut Checkpoint, lossy: &dyn LossyCodec) -> Result<StepMetrics> {
    let cfg = ckpt.config.clone();
    let step = ckpt.step;
    let batch = prepare_batch(images, &cfg, step, lossy)?;
    let samples: Vec<Sample> = batch
        .iter()
        .map(|p| Sample {
            lossy: &p.lossy,
            residual: &p.residual,
            bias_tau: Some(p.tau),
        })
        .collect();
    let (loss, mut grads) = backward(LossSelection::Both, &samples, &ckpt.weights).map_err(|e| match e {
        Error::NonFiniteLoss { main, bias, .. } => Error::NonFiniteLoss { step, main, bias },
        other => other,
    })?;
    let n = loss.subpixels as f64;
    let metrics = StepMetrics {
        step,
        main_bits: loss.main_bits / n,
        bias_bits: loss.bias_bits / n,
        lr: cfg.learning_rate_at(step),
    };
    if !metrics.main_bits.is_finite() || !metrics.bias_bits.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            main: metrics.main_bits,
            bias: metrics.bias_bits,
        });
    }
    // every sample carries both terms over the same subpixels
    grads.scale(1.0 / n);
    ckpt.adam.apply(&mut ckpt.weights, &grads, metrics.lr, &cfg);
    ckpt.step += 1;
    Ok(metrics)
}

/// Trains until `ckpt.config.steps`, calling `observe` after every step.
pub fn train_on_images(
    images: &[Image],
    mut ckpt: Checkpoint,
    lossy: &dyn LossyCodec,
    mut observe: impl FnMut(&StepMetrics, &Checkpoint),
) -> Result<Checkpoint> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    ckpt.config.validate()?;
    while ckpt.step < ckpt.config.steps {
        let m = train_step(images, &mut ckpt, lossy)?;
        observe(&m, &ckpt);
    }
    Ok(ckpt)
}

/// Trains from scratch on `cfg.dataset` with the default lossy layer.
pub fn train(cfg: &TrainConfig) -> Result<Checkpoint> {
    let dir = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no dataset directory configured".into()))?;
    let images: Vec<Image> = load_dir(dir)?.into_iter().map(|(_, img)| img).collect();
    if images.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    train_on_images(&images, Checkpoint::fresh(cfg), &BlockDctCodec::default(), |_, _| {})
}

/// Lossy reconstructions and residuals of whole images.
pub fn residuals_of(images: &[Image], lossy: &dyn LossyCodec) -> Result<Vec<(Image, ResidualPlane)>> {
    images
        .iter()
        .map(|x| {
            let x_tilde = lossy.reconstruct(x)?;
            let r = ResidualPlane::difference(x, &x_tilde)?;
            Ok((x_tilde, r))
        })
        .collect()
}

/// Mean bits per subpixel of the true residuals under the plain model.
pub fn heldout_bpsp(w: &ModelWeights, data: &[(Image, ResidualPlane)]) -> Result<f64> {
    let samples: Vec<Sample> = data
        .iter()
        .map(|(l, r)| Sample {
            lossy: l,
            residual: r,
            bias_tau: None,
        })
        .collect();
    let v = evaluate(&samples, w)?;
    Ok(v.main_bits / v.subpixels as f64)
}

/// Scale of a zero-mean logistic whose variance matches `E[r²]`.
pub fn moment_matched_scale(planes: &[ResidualPlane]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in planes {
        for &v in p.data() {
            sum += f64::from(v) * f64::from(v);
            n += 1;
        }
    }
    let var = if n == 0 { 1.0 } else { sum / n as f64 };
    // logistic variance is s² π² / 3
    ((3.0 * var).sqrt() / std::f64::consts::PI).max(crate::model::SIGMA_MIN)
}

/// Bits per subpixel of `planes` under a single zero-mean logistic of scale
/// `s` over the residual support.
pub fn logistic_baseline_bpsp(planes: &[ResidualPlane], s: f64) -> f64 {
    let mut pi = [0.0; K];
    pi[0] = 1.0;
    let (mu, sigma) = ([0.0; K], [s; K]);
    let (mut bits, mut n) = (0.0, 0usize);
    for p in planes {
        for &v in p.data() {
            bits -= log_prob(i32::from(v), &mu, &sigma, &pi) / std::f64::consts::LN_2;
            n += 1;
        }
    }
    bits / n as f64
}

/// Writes metrics as CSV with [`METRICS_HEADER`].
pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
