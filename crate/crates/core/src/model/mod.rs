//! The residual probability model.
//!
//! Features `u` come from two 3x3 convolutions over the lossy reconstruction,
//! the causal context `C` from a masked 5x5 convolution over the residual
//! plane. An estimator (two 1x1 layers of width 128 and a 48-wide head) maps
//! `[u; C]` to a 5-component discrete logistic mixture per channel plus
//! channel-autoregression coefficients. A second estimator of the same shape
//! with per-τ scale and shift after every layer serves quantized residuals.

pub mod engine;
pub mod infer;
pub mod mixture;
pub mod weights;

pub use engine::{backward, evaluate, LossSelection, LossValues, Sample};
pub use infer::{
    bias_correction_loss, estimate_params, extract_context, extract_feature, nll_bits,
    nll_bits_with, nll_terms_with, CodingModel, ContextMap, FeatureMap,
};
pub use mixture::{autoregress_means, discrete_pmf, log_prob, MixtureParams, PixelMixture};
pub use weights::{GradientSet, ModelWeights, Param};

/// Mixture components per channel.
pub const K: usize = 5;
pub const FEAT_CHANNELS: usize = 64;
pub const CTX_CHANNELS: usize = 64;
pub const HIDDEN: usize = 128;
/// π, μ and σ for three channels plus three β.
pub const HEAD_OUT: usize = 9 * K + 3;
pub const SIGMA_MIN: f64 = 1e-3;
/// Scale pre-activation bias at initialization; softplus gives σ ≈ 2.
pub(crate) const SIGMA_INIT_PRE: f64 = 1.854_586_542_131_141;

/// Network input for a lossy subpixel value `v` is `(v - LOSSY_CENTER) * LOSSY_SCALE`.
pub const LOSSY_CENTER: f64 = 127.5;
pub const LOSSY_SCALE: f64 = 1.0 / 64.0;
/// Context input for a residual `r` is `r * RESIDUAL_SCALE`.
pub const RESIDUAL_SCALE: f64 = 1.0 / 16.0;

pub(crate) fn tau_slot(condition: Option<crate::quantizer::Tau>) -> crate::Result<Option<usize>> {
    match condition {
        None => Ok(None),
        Some(t) if t.get() == 0 => Err(crate::Error::InvalidArgument(
            "the conditional estimator is only defined for tau 1..=5".into(),
        )),
        Some(t) => Ok(Some(usize::from(t.get()) - 1)),
    }
}
