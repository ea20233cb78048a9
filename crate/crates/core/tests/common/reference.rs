//! Straightforward per-pixel forward pass written directly against the
//! tensor shapes, used as an oracle for the library's optimized paths.

use nllc::imageio::Image;
use nllc::model::weights::CTX_KERNEL;
use nllc::model::{ModelWeights, Param, FEAT_CHANNELS, HEAD_OUT, HIDDEN, K, SIGMA_MIN};
use nllc::quantizer::ResidualPlane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every tensor random, scales near 1, mask respected.
pub fn randomized(seed: u64, amp: f64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::init(seed);
    for &p in Param::ALL {
        let is_scale = matches!(p, Param::CondScale1 | Param::CondScale2 | Param::CondScaleHead);
        for v in w[p].iter_mut() {
            let r: f64 = rng.gen_range(-amp..amp);
            *v = if is_scale { 1.0 + r } else { *v + r * if p.len() > 1000 { 0.2 } else { 1.0 } };
        }
    }
    w.zero_masked_taps();
    w
}

/// 3x3 convolution with zero padding, weights indexed `[out][in][ky][kx]`.
fn conv3(input: &[Vec<f64>], w: usize, h: usize, weight: &[f64], bias: &[f64], cin: usize) -> Vec<Vec<f64>> {
    let cout = bias.len();
    let mut out = vec![vec![0.0; cout]; w * h];
    for y in 0..h {
        for x in 0..w {
            for o in 0..cout {
                let mut s = bias[o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            s += weight[((o * cin + i) * 3 + ky) * 3 + kx] * input[sy as usize * w + sx as usize][i];
                        }
                    }
                }
                out[y * w + x][o] = s;
            }
        }
    }
    out
}

pub fn features(img: &Image, wt: &ModelWeights) -> Vec<Vec<f64>> {
    let (w, h) = (img.width(), img.height());
    let input: Vec<Vec<f64>> = (0..w * h)
        .map(|i| (0..3).map(|c| (f64::from(img.data()[i * 3 + c]) - 127.5) / 64.0).collect())
        .collect();
    let mut hidden = conv3(&input, w, h, &wt[Param::FeatW1], &wt[Param::FeatB1], 3);
    hidden.iter_mut().flatten().for_each(|v| *v = softplus(*v));
    conv3(&hidden, w, h, &wt[Param::FeatW2], &wt[Param::FeatB2], FEAT_CHANNELS)
}

/// Masked window sum over the whole 5x5 kernel, weights `[out][in][ky][kx]`.
pub fn context(r: &ResidualPlane, wt: &ModelWeights, x: usize, y: usize) -> Vec<f64> {
    let weight = &wt[Param::CtxW];
    let bias = &wt[Param::CtxB];
    (0..bias.len())
        .map(|o| {
            let mut s = bias[o];
            for c in 0..3 {
                for ky in 0..CTX_KERNEL {
                    for kx in 0..CTX_KERNEL {
                        let (sy, sx) = (y as i64 + ky as i64 - 2, x as i64 + kx as i64 - 2);
                        if sy < 0 || sx < 0 || sy >= r.height() as i64 || sx >= r.width() as i64 {
                            continue;
                        }
                        let v = f64::from(r.get(sx as usize, sy as usize, c)) / 16.0;
                        s += weight[((o * 3 + c) * CTX_KERNEL + ky) * CTX_KERNEL + kx] * v;
                    }
                }
            }
            s
        })
        .collect()
}

fn dense(weight: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + input.iter().enumerate().map(|(i, v)| weight[o * input.len() + i] * v).sum::<f64>())
        .collect()
}

/// Raw head outputs for one pixel; `tau` selects the conditional estimator.
pub fn head(u: &[f64], ctx: &[f64], wt: &ModelWeights, tau: Option<u8>) -> Vec<f64> {
    let input: Vec<f64> = u.iter().chain(ctx).copied().collect();
    let (names, cond) = match tau {
        None => ([Param::EstW1, Param::EstB1, Param::EstW2, Param::EstB2, Param::HeadW, Param::HeadB], None),
        Some(t) => (
            [Param::CondW1, Param::CondB1, Param::CondW2, Param::CondB2, Param::CondHeadW, Param::CondHeadB],
            Some(usize::from(t) - 1),
        ),
    };
    let modulate = |z: Vec<f64>, scale: Param, shift: Param| -> Vec<f64> {
        match cond {
            None => z,
            Some(s) => {
                let n = z.len();
                z.iter().enumerate().map(|(i, v)| v * wt[scale][s * n + i] + wt[shift][s * n + i]).collect()
            }
        }
    };
    let h1 = modulate(dense(&wt[names[0]], &wt[names[1]], &input), Param::CondScale1, Param::CondShift1);
    let h1: Vec<f64> = h1.into_iter().map(softplus).collect();
    let h2 = modulate(dense(&wt[names[2]], &wt[names[3]], &h1), Param::CondScale2, Param::CondShift2);
    let h2: Vec<f64> = h2.into_iter().map(softplus).collect();
    assert_eq!(h2.len(), HIDDEN);
    let out = modulate(dense(&wt[names[4]], &wt[names[5]], &h2), Param::CondScaleHead, Param::CondShiftHead);
    assert_eq!(out.len(), HEAD_OUT);
    out
}

/// (π, μ, σ) of channel `c` after the channel autoregression with known
/// residuals `r1`, `r2`.
pub fn channel_mixture(out: &[f64], c: usize, r1: i32, r2: i32) -> ([f64; K], [f64; K], [f64; K]) {
    let logits = &out[c * K..(c + 1) * K];
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let beta = [out[45], out[46], out[47]];
    let shift = match c {
        0 => 0.0,
        1 => beta[0] * f64::from(r1),
        _ => beta[1] * f64::from(r1) + beta[2] * f64::from(r2),
    };
    let mut pi = [0.0; K];
    let mut mu = [0.0; K];
    let mut sigma = [0.0; K];
    for k in 0..K {
        pi[k] = logits[k].exp() / z;
        mu[k] = out[15 + c * K + k] + shift;
        sigma[k] = softplus(out[30 + c * K + k]) + SIGMA_MIN;
    }
    (pi, mu, sigma)
}

/// Discrete mixture mass of `v` with absorbing edges at ±255.
pub fn mass(v: i32, pi: &[f64; K], mu: &[f64; K], sigma: &[f64; K]) -> f64 {
    (0..K)
        .map(|k| {
            let up = if v == 255 { 1.0 } else { sigmoid((f64::from(v) + 0.5 - mu[k]) / sigma[k]) };
            let lo = if v == -255 { 0.0 } else { sigmoid((f64::from(v) - 0.5 - mu[k]) / sigma[k]) };
            pi[k] * (up - lo)
        })
        .sum()
}
