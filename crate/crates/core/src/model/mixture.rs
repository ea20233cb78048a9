//! Discrete logistic mixtures over the residual support.

use super::{HEAD_OUT, K, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::quantizer::{Pmf, RESIDUAL_MAX, RESIDUAL_MIN, RESIDUAL_SYMBOLS};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - e^{-x})` for `x > 0`.
fn log1mexp(x: f64) -> f64 {
    if x < std::f64::consts::LN_2 {
        (-(-x).exp_m1()).ln()
    } else {
        (-(-x).exp()).ln_1p()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mixture parameters of one pixel: per channel weights, means and scales,
/// plus the three channel-autoregression coefficients.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct PixelMixture {
    pub pi: [[f64; K]; 3],
    pub mu: [[f64; K]; 3],
    pub sigma: [[f64; K]; 3],
    pub beta: [f64; 3],
}

impl PixelMixture {
    /// Head layout: logits `[0, 15)`, means `[15, 30)`, scale pre-activations
    /// `[30, 45)`, β `[45, 48)`; channel-major, component-minor.
    pub fn from_head(out: &[f64; HEAD_OUT]) -> Self {
        let mut p = PixelMixture {
            pi: [[0.0; K]; 3],
            mu: [[0.0; K]; 3],
            sigma: [[0.0; K]; 3],
            beta: [out[45], out[46], out[47]],
        };
        for c in 0..3 {
            let logits = &out[c * K..(c + 1) * K];
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..K {
                p.pi[c][k] = (logits[k] - m).exp();
                z += p.pi[c][k];
            }
            for k in 0..K {
                p.pi[c][k] /= z;
                p.mu[c][k] = out[15 + c * K + k];
                p.sigma[c][k] = softplus(out[30 + c * K + k]) + SIGMA_MIN;
            }
        }
        p
    }
}

/// Per-pixel mixture parameters for a whole image, raster order.
#[derive(Clone, PartialEq, Debug)]
pub struct MixtureParams {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<PixelMixture>,
}

impl MixtureParams {
    pub fn at(&self, x: usize, y: usize) -> &PixelMixture {
        &self.pixels[y * self.width + x]
    }
}

/// Shifts the means of channels 2 and 3 by the already known residuals of
/// the earlier channels.
pub fn autoregress_means(p: &PixelMixture, r1: i32, r2: i32) -> PixelMixture {
    let mut out = *p;
    let (r1, r2) = (f64::from(r1), f64::from(r2));
    for k in 0..K {
        out.mu[1][k] = p.mu[1][k] + p.beta[0] * r1;
        out.mu[2][k] = p.mu[2][k] + p.beta[1] * r1 + p.beta[2] * r2;
    }
    out
}

/// Fills `masses[v + 255]` with the mixture probability of residual `v`.
/// The tails are absorbed into the edge symbols so the masses telescope to 1.
pub fn fill_masses(mu: &[f64; K], sigma: &[f64; K], pi: &[f64; K], masses: &mut [f64]) {
    const BOUNDARIES: usize = RESIDUAL_SYMBOLS - 1;
    assert_eq!(masses.len(), RESIDUAL_SYMBOLS);
    masses.fill(0.0);
    // upper[j] = S(z_j), lower[j] = S(-z_j) at boundary j + RESIDUAL_MIN + 0.5
    let mut upper = [0.0; BOUNDARIES];
    let mut lower = [0.0; BOUNDARIES];
    for k in 0..K {
        let inv = 1.0 / sigma[k];
        for j in 0..BOUNDARIES {
            let z = (f64::from(RESIDUAL_MIN) + 0.5 + j as f64 - mu[k]) * inv;
            let e = (-z.abs()).exp();
            let hi = 1.0 / (1.0 + e);
            let lo = e / (1.0 + e);
            if z >= 0.0 {
                upper[j] = hi;
                lower[j] = lo;
            } else {
                upper[j] = lo;
                lower[j] = hi;
            }
        }
        let w = pi[k];
        masses[0] += w * upper[0];
        for i in 1..BOUNDARIES {
            let v = f64::from(RESIDUAL_MIN) + i as f64;
            let m = if v < mu[k] {
                upper[i] - upper[i - 1]
            } else {
                lower[i - 1] - lower[i]
            };
            masses[i] += w * m.max(0.0);
        }
        masses[BOUNDARIES] += w * lower[BOUNDARIES - 1];
    }
}

/// The mixture as a Pmf over `[-255, 255]`.
pub fn discrete_pmf(mu: &[f64; K], sigma: &[f64; K], pi: &[f64; K]) -> Result<Pmf> {
    let mut masses = vec![0.0; RESIDUAL_SYMBOLS];
    fill_masses(mu, sigma, pi, &mut masses);
    Pmf::contiguous(RESIDUAL_MIN, masses)
}

/// Natural log of one logistic component's mass at `v`, with absorbing
/// edges.
pub fn log_mass(v: i32, mu: f64, s: f64) -> f64 {
    let a = (f64::from(v) + 0.5 - mu) / s;
    let b = (f64::from(v) - 0.5 - mu) / s;
    if v <= RESIDUAL_MIN {
        -softplus(-a)
    } else if v >= RESIDUAL_MAX {
        -softplus(b)
    } else {
        -softplus(-a) - softplus(b) + log1mexp(1.0 / s)
    }
}

/// Natural log of the mixture probability of `v`.
pub fn log_prob(v: i32, mu: &[f64; K], sigma: &[f64; K], pi: &[f64; K]) -> f64 {
    let mut terms = [0.0; K];
    for k in 0..K {
        terms[k] = pi[k].ln() + log_mass(v, mu[k], sigma[k]);
    }
    log_sum_exp(&terms)
}

/// Negative log-likelihood (nats) of one subpixel together with its
/// gradients w.r.t. the mixture logits, the (autoregressed) means, and the
/// scale pre-activations.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelGrad {
    pub nll: f64,
    pub dlogit: [f64; K],
    pub dmu: [f64; K],
    pub dq: [f64; K],
}

pub(crate) fn channel_nll_grad(v: i32, logits: &[f64], mu: &[f64; K], q: &[f64]) -> ChannelGrad {
    let lse_logits = log_sum_exp(logits);
    let mut terms = [0.0; K];
    let mut dlm_dmu = [0.0; K];
    let mut dlm_ds = [0.0; K];
    let mut pi = [0.0; K];
    let mut ds_dq = [0.0; K];
    for k in 0..K {
        let s = softplus(q[k]) + SIGMA_MIN;
        ds_dq[k] = sigmoid(q[k]);
        let log_pi = logits[k] - lse_logits;
        pi[k] = log_pi.exp();
        let a = (f64::from(v) + 0.5 - mu[k]) / s;
        let b = (f64::from(v) - 0.5 - mu[k]) / s;
        let lm;
        if v <= RESIDUAL_MIN {
            lm = -softplus(-a);
            dlm_dmu[k] = -sigmoid(-a) / s;
            dlm_ds[k] = -a * sigmoid(-a) / s;
        } else if v >= RESIDUAL_MAX {
            lm = -softplus(b);
            dlm_dmu[k] = sigmoid(b) / s;
            dlm_ds[k] = b * sigmoid(b) / s;
        } else {
            lm = -softplus(-a) - softplus(b) + log1mexp(1.0 / s);
            dlm_dmu[k] = (-sigmoid(-a) + sigmoid(b)) / s;
            dlm_ds[k] =
                (-a * sigmoid(-a) + b * sigmoid(b)) / s - 1.0 / (s * s * (1.0 / s).exp_m1());
        }
        terms[k] = log_pi + lm;
    }
    let lp = log_sum_exp(&terms);
    let mut g = ChannelGrad {
        nll: -lp,
        dlogit: [0.0; K],
        dmu: [0.0; K],
        dq: [0.0; K],
    };
    for k in 0..K {
        let gamma = (terms[k] - lp).exp();
        g.dlogit[k] = pi[k] - gamma;
        g.dmu[k] = -gamma * dlm_dmu[k];
        g.dq[k] = -gamma * dlm_ds[k] * ds_dq[k];
    }
    g
}

/// Checks the MixtureParams invariants for one pixel.
pub fn validate(p: &PixelMixture) -> Result<()> {
    for c in 0..3 {
        let total: f64 = p.pi[c].iter().sum();
        if (total - 1.0).abs() > 1e-6 || p.pi[c].iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::InvalidArgument(format!("mixture weights of channel {c} are not a simplex")));
        }
        if p.sigma[c].iter().any(|&s| !(s >= SIGMA_MIN) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale below floor in channel {c}")));
        }
        if p.mu[c].iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite mean in channel {c}")));
        }
    }
    Ok(())
}
