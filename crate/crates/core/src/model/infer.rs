//! Scalar, deterministic inference.
//!
//! [`CodingModel`] is what encoder and decoder run: fixed summation order,
//! no fused multiply-add, so both sides derive identical probabilities. The
//! image-level operations below are thin wrappers over it.

use super::mixture::{self, autoregress_means, PixelMixture};
use super::weights::{Param, CTX_KERNEL};
use super::{
    tau_slot, MixtureParams, ModelWeights, CTX_CHANNELS, FEAT_CHANNELS, HEAD_OUT, HIDDEN,
    LOSSY_CENTER, LOSSY_SCALE, RESIDUAL_SCALE,
};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::quantizer::{ResidualPlane, Tau};

const TRUNK_IN: usize = FEAT_CHANNELS + CTX_CHANNELS;

/// 64 feature channels per pixel, raster order.
#[derive(Clone, PartialEq, Debug)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * FEAT_CHANNELS;
        &self.data[i..i + FEAT_CHANNELS]
    }
}

/// 64 context channels per pixel, raster order. `causal` is set when the
/// weights that produced it satisfy the mask.
#[derive(Clone, PartialEq, Debug)]
pub struct ContextMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub causal: bool,
}

impl ContextMap {
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * CTX_CHANNELS;
        &self.data[i..i + CTX_CHANNELS]
    }
}

/// `acc[o] += w[i * n + o] * x[i]` for every `i`, in order.
fn axpy_rows(acc: &mut [f64], wt: &[f64], x: &[f64]) {
    let n = acc.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &wt[i * n..(i + 1) * n];
        for (a, &w) in acc.iter_mut().zip(row) {
            *a += w * xi;
        }
    }
}

/// `[out][in]` to `[in][out]`.
fn transpose(w: &[f64], outs: usize, ins: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for o in 0..outs {
        for i in 0..ins {
            t[i * outs + o] = w[o * ins + i];
        }
    }
    t
}

#[derive(Clone, Debug)]
struct Trunk {
    w1t: Vec<f64>,
    b1: Vec<f64>,
    w2t: Vec<f64>,
    b2: Vec<f64>,
    headt: Vec<f64>,
    head_b: Vec<f64>,
}

impl Trunk {
    fn new(w: &ModelWeights, params: [Param; 6]) -> Self {
        let [w1, b1, w2, b2, h, hb] = params;
        Self {
            w1t: transpose(&w[w1], HIDDEN, TRUNK_IN),
            b1: w[b1].to_vec(),
            w2t: transpose(&w[w2], HIDDEN, HIDDEN),
            b2: w[b2].to_vec(),
            headt: transpose(&w[h], HEAD_OUT, HIDDEN),
            head_b: w[hb].to_vec(),
        }
    }
}

/// Per-τ scale and shift rows of the conditional estimator.
#[derive(Clone, Debug)]
struct Conditioning {
    scale: [Vec<f64>; 3],
    shift: [Vec<f64>; 3],
}

/// Inference-only form of [`ModelWeights`] with transposed matrices.
#[derive(Clone, Debug)]
pub struct CodingModel {
    feat_w1t: Vec<f64>,
    feat_b1: Vec<f64>,
    feat_w2t: Vec<f64>,
    feat_b2: Vec<f64>,
    ctx_wt: Vec<f64>,
    ctx_b: Vec<f64>,
    plain: Trunk,
    cond: Trunk,
    conditioning: Conditioning,
}

impl CodingModel {
    pub fn new(w: &ModelWeights) -> Self {
        let taps = CTX_KERNEL * CTX_KERNEL;
        Self {
            feat_w1t: transpose(&w[Param::FeatW1], FEAT_CHANNELS, 27),
            feat_b1: w[Param::FeatB1].to_vec(),
            feat_w2t: transpose(&w[Param::FeatW2], FEAT_CHANNELS, FEAT_CHANNELS * 9),
            feat_b2: w[Param::FeatB2].to_vec(),
            ctx_wt: transpose(&w[Param::CtxW], CTX_CHANNELS, 3 * taps),
            ctx_b: w[Param::CtxB].to_vec(),
            plain: Trunk::new(
                w,
                [Param::EstW1, Param::EstB1, Param::EstW2, Param::EstB2, Param::HeadW, Param::HeadB],
            ),
            cond: Trunk::new(
                w,
                [Param::CondW1, Param::CondB1, Param::CondW2, Param::CondB2, Param::CondHeadW, Param::CondHeadB],
            ),
            conditioning: Conditioning {
                scale: [
                    w[Param::CondScale1].to_vec(),
                    w[Param::CondScale2].to_vec(),
                    w[Param::CondScaleHead].to_vec(),
                ],
                shift: [
                    w[Param::CondShift1].to_vec(),
                    w[Param::CondShift2].to_vec(),
                    w[Param::CondShiftHead].to_vec(),
                ],
            },
        }
    }

    /// Feature map of the lossy reconstruction; zero padding in normalized
    /// units.
    pub fn features(&self, lossy: &Image) -> FeatureMap {
        let (w, h) = (lossy.width(), lossy.height());
        let input: Vec<f64> = lossy
            .data()
            .iter()
            .map(|&v| (f64::from(v) - LOSSY_CENTER) * LOSSY_SCALE)
            .collect();
        let hidden = conv3x3(&input, w, h, 3, &self.feat_w1t, &self.feat_b1, true);
        let data = conv3x3(&hidden, w, h, FEAT_CHANNELS, &self.feat_w2t, &self.feat_b2, false);
        FeatureMap {
            width: w,
            height: h,
            data,
        }
    }

    /// Context vector at `(x, y)` from the first `taps` raster-ordered kernel
    /// taps. With `taps = CAUSAL_TAPS` only already-coded residuals are read.
    pub fn context_at(&self, plane: &ResidualPlane, x: usize, y: usize, taps: usize) -> [f64; CTX_CHANNELS] {
        let kernel_taps = CTX_KERNEL * CTX_KERNEL;
        let half = (CTX_KERNEL / 2) as isize;
        let mut acc = [0.0; CTX_CHANNELS];
        acc.copy_from_slice(&self.ctx_b);
        for c in 0..3 {
            for t in 0..taps {
                let sy = y as isize + (t / CTX_KERNEL) as isize - half;
                let sx = x as isize + (t % CTX_KERNEL) as isize - half;
                if sy < 0 || sx < 0 || sy >= plane.height() as isize || sx >= plane.width() as isize {
                    continue;
                }
                let v = f64::from(plane.get(sx as usize, sy as usize, c)) * RESIDUAL_SCALE;
                let row = (c * kernel_taps + t) * CTX_CHANNELS;
                for (a, &w) in acc.iter_mut().zip(&self.ctx_wt[row..row + CTX_CHANNELS]) {
                    *a += w * v;
                }
            }
        }
        acc
    }

    /// Mixture parameters from one pixel's feature and context vectors.
    /// `slot` selects the conditional estimator for τ = slot + 1.
    pub fn params_at(&self, u: &[f64], ctx: &[f64], slot: Option<usize>) -> PixelMixture {
        let mut input = [0.0; TRUNK_IN];
        input[..FEAT_CHANNELS].copy_from_slice(u);
        input[FEAT_CHANNELS..].copy_from_slice(ctx);
        let trunk = if slot.is_some() { &self.cond } else { &self.plain };
        let condition = |layer: usize, z: &mut [f64]| {
            if let Some(t) = slot {
                let n = z.len();
                let scale = &self.conditioning.scale[layer][t * n..(t + 1) * n];
                let shift = &self.conditioning.shift[layer][t * n..(t + 1) * n];
                for ((v, &s), &b) in z.iter_mut().zip(scale).zip(shift) {
                    *v = *v * s + b;
                }
            }
        };

        let mut h1 = [0.0; HIDDEN];
        h1.copy_from_slice(&trunk.b1);
        axpy_rows(&mut h1, &trunk.w1t, &input);
        condition(0, &mut h1);
        h1.iter_mut().for_each(|v| *v = mixture::softplus(*v));

        let mut h2 = [0.0; HIDDEN];
        h2.copy_from_slice(&trunk.b2);
        axpy_rows(&mut h2, &trunk.w2t, &h1);
        condition(1, &mut h2);
        h2.iter_mut().for_each(|v| *v = mixture::softplus(*v));

        let mut out = [0.0; HEAD_OUT];
        out.copy_from_slice(&trunk.head_b);
        axpy_rows(&mut out, &trunk.headt, &h2);
        condition(2, &mut out);
        PixelMixture::from_head(&out)
    }
}

fn conv3x3(input: &[f64], w: usize, h: usize, cin: usize, wt: &[f64], bias: &[f64], activate: bool) -> Vec<f64> {
    let cout = bias.len();
    let mut out = vec![0.0; w * h * cout];
    for y in 0..h {
        for x in 0..w {
            let acc = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            acc.copy_from_slice(bias);
            for c in 0..cin {
                for t in 0..9 {
                    let sy = y as isize + (t / 3) as isize - 1;
                    let sx = x as isize + (t % 3) as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let v = input[(sy as usize * w + sx as usize) * cin + c];
                    let row = (c * 9 + t) * cout;
                    for (a, &wv) in acc.iter_mut().zip(&wt[row..row + cout]) {
                        *a += wv * v;
                    }
                }
            }
            if activate {
                acc.iter_mut().for_each(|v| *v = mixture::softplus(*v));
            }
        }
    }
    out
}

pub fn extract_feature(lossy: &Image, w: &ModelWeights) -> FeatureMap {
    CodingModel::new(w).features(lossy)
}

/// Context map using the full 5x5 kernel; causal exactly when the mask holds.
pub fn extract_context(residuals: &ResidualPlane, w: &ModelWeights) -> ContextMap {
    let model = CodingModel::new(w);
    let (width, height) = (residuals.width(), residuals.height());
    let mut data = Vec::with_capacity(width * height * CTX_CHANNELS);
    for y in 0..height {
        for x in 0..width {
            data.extend_from_slice(&model.context_at(residuals, x, y, CTX_KERNEL * CTX_KERNEL));
        }
    }
    ContextMap {
        width,
        height,
        data,
        causal: w.check_mask().is_ok(),
    }
}

fn check_maps(u: &FeatureMap, ctx: &ContextMap) -> Result<()> {
    if u.width != ctx.width || u.height != ctx.height {
        return Err(Error::DimensionMismatch(format!(
            "features {}x{} vs context {}x{}",
            u.width, u.height, ctx.width, ctx.height
        )));
    }
    Ok(())
}

/// Plain estimator for `condition = None`, conditional estimator otherwise.
pub fn estimate_params(u: &FeatureMap, ctx: &ContextMap, w: &ModelWeights, condition: Option<Tau>) -> Result<MixtureParams> {
    check_maps(u, ctx)?;
    let slot = tau_slot(condition)?;
    let model = CodingModel::new(w);
    let mut pixels = Vec::with_capacity(u.width * u.height);
    for y in 0..u.height {
        for x in 0..u.width {
            pixels.push(model.params_at(u.at(x, y), ctx.at(x, y), slot));
        }
    }
    Ok(MixtureParams {
        width: u.width,
        height: u.height,
        pixels,
    })
}

/// Per-subpixel code lengths in bits of `r`, with the channel
/// autoregression driven by `conditioning` (`r` itself, or `r̂`).
pub fn nll_terms_with(
    r: &ResidualPlane,
    conditioning: &ResidualPlane,
    u: &FeatureMap,
    ctx: &ContextMap,
    w: &ModelWeights,
    condition: Option<Tau>,
) -> Result<Vec<f64>> {
    if r.width() != u.width || r.height() != u.height || conditioning.width() != r.width() || conditioning.height() != r.height() {
        return Err(Error::DimensionMismatch("residual planes and maps differ in size".into()));
    }
    let params = estimate_params(u, ctx, w, condition)?;
    let mut terms = Vec::with_capacity(r.width() * r.height() * 3);
    for y in 0..r.height() {
        for x in 0..r.width() {
            let p = autoregress_means(params.at(x, y), conditioning.get(x, y, 0), conditioning.get(x, y, 1));
            for c in 0..3 {
                let lp = mixture::log_prob(r.get(x, y, c), &p.mu[c], &p.sigma[c], &p.pi[c]);
                terms.push(-lp / std::f64::consts::LN_2);
            }
        }
    }
    Ok(terms)
}

pub fn nll_bits_with(
    r: &ResidualPlane,
    conditioning: &ResidualPlane,
    u: &FeatureMap,
    ctx: &ContextMap,
    w: &ModelWeights,
    condition: Option<Tau>,
) -> Result<f64> {
    Ok(nll_terms_with(r, conditioning, u, ctx, w, condition)?.iter().sum())
}

/// Code length in bits of `r` with its own values driving the channel
/// autoregression.
pub fn nll_bits(r: &ResidualPlane, u: &FeatureMap, ctx: &ContextMap, w: &ModelWeights, condition: Option<Tau>) -> Result<f64> {
    nll_bits_with(r, r, u, ctx, w, condition)
}

/// Bits of the true residual under the conditional estimator fed quantized
/// context and quantized channel conditioning, minus its bits under the plain
/// estimator with true context.
pub fn bias_correction_loss(r: &ResidualPlane, r_hat: &ResidualPlane, u: &FeatureMap, w: &ModelWeights, tau: Tau) -> Result<f64> {
    if tau.get() == 0 {
        return Err(Error::InvalidArgument("bias correction needs tau >= 1".into()));
    }
    let ctx_hat = extract_context(r_hat, w);
    let ctx = extract_context(r, w);
    let corrected = nll_bits_with(r, r_hat, u, &ctx_hat, w, Some(tau))?;
    let reference = nll_bits(r, u, &ctx, w, None)?;
    Ok(corrected - reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SIGMA_MIN, K};

    fn noisy_plane(w: usize, h: usize, seed: u32) -> ResidualPlane {
        let mut s = seed;
        let data = (0..w * h * 3)
            .map(|_| {
                s = s.wrapping_mul(1_103_515_245).wrapping_add(12345);
                ((s >> 16) % 21) as i16 - 10
            })
            .collect();
        ResidualPlane::new(w, h, data).unwrap()
    }

    fn image(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y, c| ((x * 31 + y * 17 + c * 71) % 256) as u8)
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let f = extract_feature(&image(5, 4), &ModelWeights::zeros());
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_estimator_is_uniform_mixture() {
        let w = ModelWeights::zeros();
        let r = noisy_plane(3, 3, 1);
        let u = extract_feature(&image(3, 3), &w);
        let ctx = extract_context(&r, &w);
        let p = estimate_params(&u, &ctx, &w, None).unwrap();
        for px in &p.pixels {
            for c in 0..3 {
                assert_eq!(px.pi[c], [1.0 / K as f64; K]);
                assert_eq!(px.sigma[c], [std::f64::consts::LN_2 + SIGMA_MIN; K]);
            }
        }
    }

    #[test]
    fn first_pixel_context_is_bias_only() {
        let w = ModelWeights::init(5);
        let ctx = extract_context(&noisy_plane(4, 4, 9), &w);
        assert_eq!(ctx.at(0, 0), &w[Param::CtxB][..]);
        assert!(ctx.causal);
    }

    #[test]
    fn last_pixel_flip_is_invisible_to_context() {
        let w = ModelWeights::init(5);
        let r = noisy_plane(6, 5, 2);
        let mut flipped = r.clone();
        flipped.set(5, 4, 1, -r.get(5, 4, 1) + 3);
        let a = extract_context(&r, &w);
        let b = extract_context(&flipped, &w);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn conditioned_identity_is_tau_invariant() {
        let w = ModelWeights::init(11);
        let r = noisy_plane(4, 4, 3);
        let u = extract_feature(&image(4, 4), &w);
        let ctx = extract_context(&r, &w);
        let first = estimate_params(&u, &ctx, &w, Some(Tau::new(1).unwrap())).unwrap();
        for t in 2..=5 {
            assert_eq!(first, estimate_params(&u, &ctx, &w, Some(Tau::new(t).unwrap())).unwrap());
        }
        assert_eq!(first, estimate_params(&u, &ctx, &w, None).unwrap());
        assert!(estimate_params(&u, &ctx, &w, Some(Tau::LOSSLESS)).is_err());
    }

    #[test]
    fn matched_models_have_zero_bias_loss() {
        let w = ModelWeights::init(4);
        let r = ResidualPlane::zeros(4, 3);
        let u = extract_feature(&image(4, 3), &w);
        let tau = Tau::new(2).unwrap();
        let loss = bias_correction_loss(&r, &r.quantize(tau), &u, &w, tau).unwrap();
        assert_eq!(loss, 0.0);
    }
}
