//! Batched forward and reverse-mode backward passes for training.
//!
//! Convolutions are lowered to matrix products (im2col) and run through
//! `matrixmultiply`. The context convolution uses the full 5x5 kernel here;
//! masked taps are held at zero by excluding them from the gradient. Results
//! agree with the scalar inference path up to floating-point reassociation.

use super::mixture::{channel_nll_grad, softplus, sigmoid};
use super::weights::{is_causal_ctx_index, Param, CTX_KERNEL};
use super::{
    tau_slot, GradientSet, ModelWeights, CTX_CHANNELS, FEAT_CHANNELS, HEAD_OUT, HIDDEN, K,
    LOSSY_CENTER, LOSSY_SCALE, RESIDUAL_SCALE,
};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::quantizer::{ResidualPlane, Tau};

const TRUNK_IN: usize = FEAT_CHANNELS + CTX_CHANNELS;
const CTX_TAPS: usize = CTX_KERNEL * CTX_KERNEL;

/// Which objective to differentiate.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LossSelection {
    /// Bits of the true residual under the plain estimator.
    Main,
    /// Conditional-estimator bits of the true residual given quantized
    /// context. Only conditional tensors receive gradient.
    Bias,
    Both,
}

impl LossSelection {
    fn main(self) -> bool {
        matches!(self, LossSelection::Main | LossSelection::Both)
    }

    fn bias(self) -> bool {
        matches!(self, LossSelection::Bias | LossSelection::Both)
    }
}

/// One training example. `bias_tau` enables the bias term for this sample.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub lossy: &'a Image,
    pub residual: &'a ResidualPlane,
    pub bias_tau: Option<Tau>,
}

/// Summed over samples, in bits. `bias_bits` is conditional bits minus the
/// plain-model bits of the same samples.
#[derive(Clone, Copy, Default, PartialEq, Debug)]
pub struct LossValues {
    pub main_bits: f64,
    pub bias_bits: f64,
    /// Subpixels that contributed to `main_bits`.
    pub subpixels: usize,
    /// Subpixels that contributed to `bias_bits`.
    pub bias_subpixels: usize,
}

/// Loss values and their gradients, summed over `samples`.
pub fn backward(sel: LossSelection, samples: &[Sample], w: &ModelWeights) -> Result<(LossValues, GradientSet)> {
    let mut grads = GradientSet::zeros();
    let mut total = LossValues::default();
    for s in samples {
        let v = run(s, w, sel, Some(&mut grads))?;
        total.main_bits += v.main_bits;
        total.bias_bits += v.bias_bits;
        total.subpixels += v.subpixels;
        total.bias_subpixels += v.bias_subpixels;
    }
    for (i, g) in grads[Param::CtxW].iter_mut().enumerate() {
        if !is_causal_ctx_index(i) {
            *g = 0.0;
        }
    }
    Ok((total, grads))
}

/// Loss values without gradients.
pub fn evaluate(samples: &[Sample], w: &ModelWeights) -> Result<LossValues> {
    let mut total = LossValues::default();
    for s in samples {
        let v = run(s, w, LossSelection::Both, None)?;
        total.main_bits += v.main_bits;
        total.bias_bits += v.bias_bits;
        total.subpixels += v.subpixels;
        total.bias_subpixels += v.bias_subpixels;
    }
    Ok(total)
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x (p x in) · wᵀ + bias` where `w` is `out x in`.
fn linear(x: &[f64], p: usize, ins: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
    let outs = bias.len();
    let mut y = Vec::with_capacity(p * outs);
    for _ in 0..p {
        y.extend_from_slice(bias);
    }
    gemm(p, ins, outs, x, (ins, 1), w, (1, ins), &mut y, 1.0);
    y
}

/// Accumulates `dw += dyᵀ · x` and `db += colsum(dy)`, returns `dx = dy · w`
/// when requested.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    dy: &[f64],
    x: &[f64],
    p: usize,
    ins: usize,
    outs: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    gemm(outs, p, ins, dy, (1, outs), x, (ins, 1), dw, 1.0);
    for row in dy.chunks_exact(outs) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; p * ins];
        gemm(p, outs, ins, dy, (outs, 1), w, (ins, 1), &mut dx, 0.0);
        dx
    })
}

/// Patch matrix for a `kernel x kernel` convolution with zero padding;
/// column `c * kernel² + tap`.
fn im2col(input: &[f64], width: usize, height: usize, channels: usize, kernel: usize) -> Vec<f64> {
    let taps = kernel * kernel;
    let half = (kernel / 2) as isize;
    let cols = channels * taps;
    let mut out = vec![0.0; width * height * cols];
    for y in 0..height {
        for x in 0..width {
            let row = &mut out[(y * width + x) * cols..(y * width + x + 1) * cols];
            for t in 0..taps {
                let sy = y as isize + (t / kernel) as isize - half;
                let sx = x as isize + (t % kernel) as isize - half;
                if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                    continue;
                }
                let src = &input[(sy as usize * width + sx as usize) * channels..][..channels];
                for (c, &v) in src.iter().enumerate() {
                    row[c * taps + t] = v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], width: usize, height: usize, channels: usize, kernel: usize) -> Vec<f64> {
    let taps = kernel * kernel;
    let half = (kernel / 2) as isize;
    let ncols = channels * taps;
    let mut out = vec![0.0; width * height * channels];
    for y in 0..height {
        for x in 0..width {
            let row = &cols[(y * width + x) * ncols..(y * width + x + 1) * ncols];
            for t in 0..taps {
                let sy = y as isize + (t / kernel) as isize - half;
                let sx = x as isize + (t % kernel) as isize - half;
                if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                    continue;
                }
                let dst = &mut out[(sy as usize * width + sx as usize) * channels..][..channels];
                for (c, d) in dst.iter_mut().enumerate() {
                    *d += row[c * taps + t];
                }
            }
        }
    }
    out
}

fn concat(a: &[f64], b: &[f64], p: usize) -> Vec<f64> {
    let (na, nb) = (a.len() / p, b.len() / p);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..p {
        out.extend_from_slice(&a[i * na..(i + 1) * na]);
        out.extend_from_slice(&b[i * nb..(i + 1) * nb]);
    }
    out
}

/// Tensors of one estimator instance.
struct EstimatorParams {
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
    head: Param,
    head_b: Param,
}

const PLAIN: EstimatorParams = EstimatorParams {
    w1: Param::EstW1,
    b1: Param::EstB1,
    w2: Param::EstW2,
    b2: Param::EstB2,
    head: Param::HeadW,
    head_b: Param::HeadB,
};

const COND: EstimatorParams = EstimatorParams {
    w1: Param::CondW1,
    b1: Param::CondB1,
    w2: Param::CondW2,
    b2: Param::CondB2,
    head: Param::CondHeadW,
    head_b: Param::CondHeadB,
};

const SCALES: [Param; 3] = [Param::CondScale1, Param::CondScale2, Param::CondScaleHead];
const SHIFTS: [Param; 3] = [Param::CondShift1, Param::CondShift2, Param::CondShiftHead];

/// Forward cache of an estimator.
struct TrunkPass {
    /// Pre-conditioning linear outputs per layer.
    pre: [Vec<f64>; 3],
    /// Post-conditioning pre-activations of the hidden layers.
    z: [Vec<f64>; 2],
    a: [Vec<f64>; 2],
    out: Vec<f64>,
}

fn condition_rows(v: &mut [f64], slot: Option<usize>, layer: usize, w: &ModelWeights) {
    if let Some(t) = slot {
        let n = if layer == 2 { HEAD_OUT } else { HIDDEN };
        let scale = &w[SCALES[layer]][t * n..(t + 1) * n];
        let shift = &w[SHIFTS[layer]][t * n..(t + 1) * n];
        for row in v.chunks_exact_mut(n) {
            for ((x, &s), &b) in row.iter_mut().zip(scale).zip(shift) {
                *x = *x * s + b;
            }
        }
    }
}

fn trunk_forward(input: &[f64], p: usize, w: &ModelWeights, e: &EstimatorParams, slot: Option<usize>) -> TrunkPass {
    let pre1 = linear(input, p, TRUNK_IN, &w[e.w1], &w[e.b1]);
    let mut z1 = pre1.clone();
    condition_rows(&mut z1, slot, 0, w);
    let a1: Vec<f64> = z1.iter().map(|&v| softplus(v)).collect();
    let pre2 = linear(&a1, p, HIDDEN, &w[e.w2], &w[e.b2]);
    let mut z2 = pre2.clone();
    condition_rows(&mut z2, slot, 1, w);
    let a2: Vec<f64> = z2.iter().map(|&v| softplus(v)).collect();
    let pre3 = linear(&a2, p, HIDDEN, &w[e.head], &w[e.head_b]);
    let mut out = pre3.clone();
    condition_rows(&mut out, slot, 2, w);
    TrunkPass {
        pre: [pre1, pre2, pre3],
        z: [z1, z2],
        a: [a1, a2],
        out,
    }
}

/// Scales `d` by the conditioning scale of `layer` in place and accumulates
/// the scale and shift gradients.
fn condition_backward(d: &mut [f64], pre: &[f64], slot: Option<usize>, layer: usize, w: &ModelWeights, g: &mut GradientSet) {
    if let Some(t) = slot {
        let n = if layer == 2 { HEAD_OUT } else { HIDDEN };
        for (row, pre_row) in d.chunks_exact(n).zip(pre.chunks_exact(n)) {
            let ds = &mut g[SCALES[layer]][t * n..(t + 1) * n];
            for ((s, &dv), &pv) in ds.iter_mut().zip(row).zip(pre_row) {
                *s += dv * pv;
            }
            let dh = &mut g[SHIFTS[layer]][t * n..(t + 1) * n];
            for (h, &dv) in dh.iter_mut().zip(row) {
                *h += dv;
            }
        }
        let scale = &w[SCALES[layer]][t * n..(t + 1) * n];
        for row in d.chunks_exact_mut(n) {
            for (dv, &s) in row.iter_mut().zip(scale) {
                *dv *= s;
            }
        }
    }
}

/// Backpropagates `d_out` through an estimator; returns the input gradient
/// when requested.
#[allow(clippy::too_many_arguments)]
fn trunk_backward(
    mut d_out: Vec<f64>,
    pass: &TrunkPass,
    input: &[f64],
    p: usize,
    w: &ModelWeights,
    e: &EstimatorParams,
    slot: Option<usize>,
    g: &mut GradientSet,
    want_dx: bool,
) -> Option<Vec<f64>> {
    condition_backward(&mut d_out, &pass.pre[2], slot, 2, w, g);
    let (dw, db) = two_mut(g, e.head, e.head_b);
    let mut d = linear_backward(&d_out, &pass.a[1], p, HIDDEN, HEAD_OUT, &w[e.head], dw, db, true).unwrap();
    for (dv, &z) in d.iter_mut().zip(&pass.z[1]) {
        *dv *= sigmoid(z);
    }
    condition_backward(&mut d, &pass.pre[1], slot, 1, w, g);
    let (dw, db) = two_mut(g, e.w2, e.b2);
    let mut d = linear_backward(&d, &pass.a[0], p, HIDDEN, HIDDEN, &w[e.w2], dw, db, true).unwrap();
    for (dv, &z) in d.iter_mut().zip(&pass.z[0]) {
        *dv *= sigmoid(z);
    }
    condition_backward(&mut d, &pass.pre[0], slot, 0, w, g);
    let (dw, db) = two_mut(g, e.w1, e.b1);
    linear_backward(&d, input, p, TRUNK_IN, HIDDEN, &w[e.w1], dw, db, want_dx)
}

fn two_mut(g: &mut GradientSet, a: Param, b: Param) -> (&mut [f64], &mut [f64]) {
    g.pair_mut(a, b)
}

/// Mixture loss over all pixels: returns bits and fills `d_out` with the
/// gradient in bits w.r.t. the head outputs.
fn mixture_loss(out: &[f64], target: &ResidualPlane, conditioning: &ResidualPlane, d_out: Option<&mut [f64]>) -> f64 {
    let inv_ln2 = 1.0 / std::f64::consts::LN_2;
    let mut total = 0.0;
    let mut d_out = d_out;
    for (i, o) in out.chunks_exact(HEAD_OUT).enumerate() {
        let (x, y) = (i % target.width(), i / target.width());
        let r1 = f64::from(conditioning.get(x, y, 0));
        let r2 = f64::from(conditioning.get(x, y, 1));
        let shifts = [0.0, o[45] * r1, o[46] * r1 + o[47] * r2];
        let mut grow = [0.0; HEAD_OUT];
        for c in 0..3 {
            let mut mu = [0.0; K];
            for k in 0..K {
                mu[k] = o[15 + c * K + k] + shifts[c];
            }
            let g = channel_nll_grad(target.get(x, y, c), &o[c * K..(c + 1) * K], &mu, &o[30 + c * K..30 + (c + 1) * K]);
            total += g.nll * inv_ln2;
            let dmu_sum: f64 = g.dmu.iter().sum();
            for k in 0..K {
                grow[c * K + k] = g.dlogit[k] * inv_ln2;
                grow[15 + c * K + k] = g.dmu[k] * inv_ln2;
                grow[30 + c * K + k] = g.dq[k] * inv_ln2;
            }
            match c {
                1 => grow[45] = dmu_sum * r1 * inv_ln2,
                2 => {
                    grow[46] = dmu_sum * r1 * inv_ln2;
                    grow[47] = dmu_sum * r2 * inv_ln2;
                }
                _ => {}
            }
        }
        if let Some(d) = d_out.as_deref_mut() {
            d[i * HEAD_OUT..(i + 1) * HEAD_OUT].copy_from_slice(&grow);
        }
    }
    total
}

fn run(s: &Sample, w: &ModelWeights, sel: LossSelection, mut grads: Option<&mut GradientSet>) -> Result<LossValues> {
    let (width, height) = (s.lossy.width(), s.lossy.height());
    if s.residual.width() != width || s.residual.height() != height {
        return Err(Error::DimensionMismatch("lossy image and residual differ in size".into()));
    }
    let slot = match s.bias_tau {
        Some(t) if sel.bias() => tau_slot(Some(t))?,
        _ => None,
    };
    let p = width * height;
    let mut values = LossValues::default();

    // features
    let input: Vec<f64> = s
        .lossy
        .data()
        .iter()
        .map(|&v| (f64::from(v) - LOSSY_CENTER) * LOSSY_SCALE)
        .collect();
    let x0 = im2col(&input, width, height, 3, 3);
    let z1 = linear(&x0, p, 27, &w[Param::FeatW1], &w[Param::FeatB1]);
    let a1: Vec<f64> = z1.iter().map(|&v| softplus(v)).collect();
    let x1 = im2col(&a1, width, height, FEAT_CHANNELS, 3);
    let u = linear(&x1, p, FEAT_CHANNELS * 9, &w[Param::FeatW2], &w[Param::FeatB2]);

    // plain estimator on the true residual
    let scaled: Vec<f64> = s.residual.data().iter().map(|&v| f64::from(v) * RESIDUAL_SCALE).collect();
    let rc = im2col(&scaled, width, height, 3, CTX_KERNEL);
    let ctx = linear(&rc, p, 3 * CTX_TAPS, &w[Param::CtxW], &w[Param::CtxB]);
    let t_in = concat(&u, &ctx, p);
    let plain = trunk_forward(&t_in, p, w, &PLAIN, None);
    let want_main_grad = grads.is_some() && sel.main();
    let mut d_out = want_main_grad.then(|| vec![0.0; p * HEAD_OUT]);
    let plain_bits = mixture_loss(&plain.out, s.residual, s.residual, d_out.as_deref_mut());
    values.main_bits = plain_bits;
    values.subpixels = 3 * p;

    if let (Some(g), Some(d_out)) = (grads.as_deref_mut(), d_out) {
        let dt = trunk_backward(d_out, &plain, &t_in, p, w, &PLAIN, None, g, true).unwrap();
        let mut du = vec![0.0; p * FEAT_CHANNELS];
        let mut dctx = vec![0.0; p * CTX_CHANNELS];
        for i in 0..p {
            du[i * FEAT_CHANNELS..(i + 1) * FEAT_CHANNELS]
                .copy_from_slice(&dt[i * TRUNK_IN..i * TRUNK_IN + FEAT_CHANNELS]);
            dctx[i * CTX_CHANNELS..(i + 1) * CTX_CHANNELS]
                .copy_from_slice(&dt[i * TRUNK_IN + FEAT_CHANNELS..(i + 1) * TRUNK_IN]);
        }
        let (dw, db) = two_mut(g, Param::CtxW, Param::CtxB);
        linear_backward(&dctx, &rc, p, 3 * CTX_TAPS, CTX_CHANNELS, &w[Param::CtxW], dw, db, false);
        let (dw, db) = two_mut(g, Param::FeatW2, Param::FeatB2);
        let dx1 = linear_backward(&du, &x1, p, FEAT_CHANNELS * 9, FEAT_CHANNELS, &w[Param::FeatW2], dw, db, true).unwrap();
        let mut da1 = col2im(&dx1, width, height, FEAT_CHANNELS, 3);
        for (d, &z) in da1.iter_mut().zip(&z1) {
            *d *= sigmoid(z);
        }
        let (dw, db) = two_mut(g, Param::FeatW1, Param::FeatB1);
        linear_backward(&da1, &x0, p, 27, FEAT_CHANNELS, &w[Param::FeatW1], dw, db, false);
    }

    if let (Some(tau), Some(slot)) = (s.bias_tau, slot) {
        let r_hat = s.residual.quantize(tau);
        let scaled: Vec<f64> = r_hat.data().iter().map(|&v| f64::from(v) * RESIDUAL_SCALE).collect();
        let rc_hat = im2col(&scaled, width, height, 3, CTX_KERNEL);
        let ctx_hat = linear(&rc_hat, p, 3 * CTX_TAPS, &w[Param::CtxW], &w[Param::CtxB]);
        let t_hat = concat(&u, &ctx_hat, p);
        let cond = trunk_forward(&t_hat, p, w, &COND, Some(slot));
        let want = grads.is_some();
        let mut d_out = want.then(|| vec![0.0; p * HEAD_OUT]);
        let cond_bits = mixture_loss(&cond.out, s.residual, &r_hat, d_out.as_deref_mut());
        values.bias_bits = cond_bits - plain_bits;
        values.bias_subpixels = 3 * p;
        if let (Some(g), Some(d_out)) = (grads.as_mut(), d_out) {
            trunk_backward(d_out, &cond, &t_hat, p, w, &COND, Some(slot), g, false);
        }
    }
    if !values.main_bits.is_finite() || !values.bias_bits.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            main: values.main_bits,
            bias: values.bias_bits,
        });
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::infer::{extract_context, extract_feature, nll_bits, nll_bits_with};

    fn fixture(seed: u32) -> (Image, ResidualPlane) {
        let lossy = Image::from_fn(5, 4, |x, y, c| ((x * 53 + y * 29 + c * 7 + seed as usize) % 256) as u8);
        let mut s = seed;
        let data = (0..5 * 4 * 3)
            .map(|_| {
                s = s.wrapping_mul(1_103_515_245).wrapping_add(12345);
                ((s >> 16) % 15) as i16 - 7
            })
            .collect();
        (lossy, ResidualPlane::new(5, 4, data).unwrap())
    }

    #[test]
    fn forward_matches_scalar_path() {
        let w = ModelWeights::init(21);
        let (lossy, r) = fixture(3);
        let tau = Tau::new(2).unwrap();
        let sample = Sample {
            lossy: &lossy,
            residual: &r,
            bias_tau: Some(tau),
        };
        let v = evaluate(&[sample], &w).unwrap();
        let u = extract_feature(&lossy, &w);
        let main = nll_bits(&r, &u, &extract_context(&r, &w), &w, None).unwrap();
        assert!((v.main_bits - main).abs() < 1e-9 * main.abs());
        let r_hat = r.quantize(tau);
        let cond = nll_bits_with(&r, &r_hat, &u, &extract_context(&r_hat, &w), &w, Some(tau)).unwrap();
        assert!((v.bias_bits - (cond - main)).abs() < 1e-9 * main.abs());
    }

    #[test]
    fn bias_loss_leaves_shared_tensors_alone() {
        let w = ModelWeights::init(2);
        let (lossy, r) = fixture(8);
        let sample = Sample {
            lossy: &lossy,
            residual: &r,
            bias_tau: Some(Tau::new(3).unwrap()),
        };
        let (_, g) = backward(LossSelection::Bias, &[sample], &w).unwrap();
        for &p in Param::ALL {
            if !p.is_conditional() {
                assert_eq!(g.max_abs(p), 0.0, "{}", p.name());
            }
        }
        assert!(g.max_abs(Param::CondHeadW) > 0.0);
    }

    #[test]
    fn masked_taps_get_no_gradient() {
        let w = ModelWeights::init(2);
        let (lossy, r) = fixture(1);
        let sample = Sample {
            lossy: &lossy,
            residual: &r,
            bias_tau: None,
        };
        let (_, g) = backward(LossSelection::Main, &[sample], &w).unwrap();
        for (i, v) in g[Param::CtxW].iter().enumerate() {
            if !is_causal_ctx_index(i) {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(g.max_abs(Param::CtxW) > 0.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (w, h, c) = (4, 3, 2);
        let x: Vec<f64> = (0..w * h * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, w, h, c, 3);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, w, h, c, 3);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
