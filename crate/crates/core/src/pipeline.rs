//! End-to-end near-lossless coding: lossy layer, residual quantization,
//! probability inference, range coding, and the container.
//!
//! Container layout (integers little-endian):
//!
//! ```text
//! "NLLC" | version u8 | width u32 | height u32 | tau u8 | flags u8
//! weights fingerprint [32]
//! lossy payload length u32 | lossy payload
//! residual payload length u32 | residual payload
//! ```
//!
//! `flags` bit 0 records that the τ-conditioned estimator was used.

use crate::coder::{build_freq_table, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::lossy::{psnr, BlockDctCodec, LossyCodec};
use crate::model::mixture::{autoregress_means, fill_masses};
use crate::model::weights::CAUSAL_TAPS;
use crate::model::{CodingModel, ModelWeights};
use crate::quantizer::{
    quantize_masses, reconstruct, Pmf, ResidualPlane, Tau, RESIDUAL_SYMBOLS,
};

const MAGIC: &[u8; 4] = b"NLLC";
pub const CONTAINER_VERSION: u8 = 1;
const FLAG_BIAS_CORRECTION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1 + 1 + 32;

/// How residual probabilities are inferred at τ > 0.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum InferenceMode {
    /// τ-conditioned estimator with quantized context.
    Corrected,
    /// Plain estimator with quantized context.
    Uncorrected,
    /// Plain estimator with the true residual as context. Encoder-side
    /// measurement only; the decoder cannot reproduce it.
    Ideal,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Corrected => "corrected",
            InferenceMode::Uncorrected => "uncorrected",
            InferenceMode::Ideal => "ideal",
        }
    }

    pub fn is_decodable(self) -> bool {
        self != InferenceMode::Ideal
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CodedContainer {
    pub width: u32,
    pub height: u32,
    pub tau: Tau,
    pub bias_correction: bool,
    pub weights_fingerprint: [u8; 32],
    pub lossy_payload: Vec<u8>,
    pub residual_payload: Vec<u8>,
}

impl CodedContainer {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + 8 + self.lossy_payload.len() + self.residual_payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.push(CONTAINER_VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.tau.get());
        out.push(if self.bias_correction { FLAG_BIAS_CORRECTION } else { 0 });
        out.extend_from_slice(&self.weights_fingerprint);
        for payload in [&self.lossy_payload, &self.residual_payload] {
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes[4] != CONTAINER_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptPayload("truncated container header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (width, height) = (u32_at(5), u32_at(9));
        let tau = Tau::new(bytes[13]).map_err(|_| Error::CorruptPayload(format!("tau {} out of range", bytes[13])))?;
        let flags = bytes[14];
        if flags & !FLAG_BIAS_CORRECTION != 0 {
            return Err(Error::CorruptPayload(format!("unknown flags {flags:#04x}")));
        }
        let weights_fingerprint: [u8; 32] = bytes[15..47].try_into().unwrap();
        let mut pos = HEADER_LEN;
        let mut section = || -> Result<Vec<u8>> {
            let len = crate::lossy::read_u32(bytes, &mut pos)? as usize;
            let data = bytes
                .get(pos..pos + len)
                .ok_or_else(|| Error::CorruptPayload("truncated container section".into()))?;
            pos += len;
            Ok(data.to_vec())
        };
        let lossy_payload = section()?;
        let residual_payload = section()?;
        if pos != bytes.len() {
            return Err(Error::CorruptPayload("trailing bytes after container".into()));
        }
        Ok(Self {
            width,
            height,
            tau,
            bias_correction: flags & FLAG_BIAS_CORRECTION != 0,
            weights_fingerprint,
            lossy_payload,
            residual_payload,
        })
    }
}

/// Rates are bits per subpixel.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct EncodeReport {
    pub bpsp_total: f64,
    pub bpsp_lossy: f64,
    pub bpsp_residual: f64,
    /// PSNR of the lossy layer alone, `x` vs `x̃`.
    pub psnr_lossy: f64,
    /// PSNR of the final reconstruction, `x` vs `x̂`.
    pub psnr: f64,
    pub linf: u8,
    /// `Σ -log2 p(r̂)` of the coded symbols under the model.
    pub self_information_bits: f64,
    /// The same sum under the integer frequency tables actually coded with.
    pub table_bits: f64,
}

/// Encoder output. `reconstruction` is the `x̂` the decoder will produce.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub container: CodedContainer,
    pub report: EncodeReport,
    pub reconstruction: Image,
}

/// Encoder-side rate of one image under a given inference mode.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct RateMeasurement {
    pub self_information_bits: f64,
    /// Code length implied by the integer frequency tables.
    pub table_bits: f64,
    pub subpixels: usize,
    pub bpsp_lossy: f64,
    pub psnr_lossy: f64,
}

impl RateMeasurement {
    pub fn bpsp(&self) -> f64 {
        self.self_information_bits / self.subpixels as f64
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Verification {
    pub linf: u8,
    pub psnr: f64,
    pub pass: bool,
}

/// Maximum absolute subpixel error and PSNR; passes iff the error is within τ.
pub fn verify(x: &Image, x_hat: &Image, tau: Tau) -> Result<Verification> {
    crate::quantizer::check_same_dims(x, x_hat)?;
    let linf = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| a.abs_diff(b))
        .max()
        .unwrap_or(0);
    Ok(Verification {
        linf,
        psnr: psnr(x, x_hat),
        pass: linf <= tau.get(),
    })
}

/// Weights plus lossy layer, ready to encode and decode.
pub struct Codec<L: LossyCodec = BlockDctCodec> {
    lossy: L,
    model: CodingModel,
    fingerprint: [u8; 32],
}

impl Codec<BlockDctCodec> {
    pub fn new(weights: &ModelWeights) -> Result<Self> {
        Self::with_lossy(BlockDctCodec::default(), weights)
    }
}

/// Symbol sink shared by encoder, decoder and rate measurement: receives the
/// position and the quantized pmf, returns the coded r̂.
type SymbolFn<'a> = dyn FnMut(usize, usize, usize, &Pmf) -> Result<i32> + 'a;

impl<L: LossyCodec> Codec<L> {
    /// Rejects weights with an open mask or non-finite values.
    pub fn with_lossy(lossy: L, weights: &ModelWeights) -> Result<Self> {
        weights.check_mask()?;
        if !weights.is_finite() {
            return Err(Error::InvalidWeights("non-finite parameter".into()));
        }
        Ok(Self {
            lossy,
            model: CodingModel::new(weights),
            fingerprint: weights.fingerprint(),
        })
    }

    pub fn lossy(&self) -> &L {
        &self.lossy
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// Raster-order, channel-order walk over the residual plane. Context and
    /// channel conditioning come from the r̂ produced so far, or from `truth`
    /// in ideal mode.
    fn walk(&self, lossy: &Image, tau: Tau, slot: Option<usize>, truth: Option<&ResidualPlane>, step: &mut SymbolFn) -> Result<ResidualPlane> {
        let (w, h) = (lossy.width(), lossy.height());
        let u = self.model.features(lossy);
        let mut coded = ResidualPlane::zeros(w, h);
        let mut masses = vec![0.0; RESIDUAL_SYMBOLS];
        for y in 0..h {
            for x in 0..w {
                let source = truth.unwrap_or(&coded);
                let ctx = self.model.context_at(source, x, y, CAUSAL_TAPS);
                let params = self.model.params_at(u.at(x, y), &ctx, slot);
                let mut known = [0i32; 2];
                for c in 0..3 {
                    let p = autoregress_means(&params, known[0], known[1]);
                    fill_masses(&p.mu[c], &p.sigma[c], &p.pi[c], &mut masses);
                    let pmf = quantize_masses(&masses, tau);
                    let v = step(x, y, c, &pmf)?;
                    coded.set(x, y, c, v);
                    if c < 2 {
                        known[c] = match truth {
                            Some(t) => t.get(x, y, c),
                            None => v,
                        };
                    }
                }
            }
        }
        Ok(coded)
    }

    fn slot_for(tau: Tau, mode: InferenceMode) -> Option<usize> {
        match mode {
            InferenceMode::Corrected if tau.get() > 0 => Some(usize::from(tau.get()) - 1),
            _ => None,
        }
    }

    /// Encodes with the corrected (`use_bias_correction`) or uncorrected
    /// inference path. At τ = 0 both use the plain estimator.
    pub fn encode(&self, x: &Image, tau: Tau, use_bias_correction: bool) -> Result<Encoded> {
        let lossy = self.lossy.encode(x)?;
        let x_tilde = &lossy.reconstruction;
        let r = ResidualPlane::difference(x, x_tilde)?;
        let r_hat = r.quantize(tau);
        let bias_correction = use_bias_correction && tau.get() > 0;
        let mode = if bias_correction { InferenceMode::Corrected } else { InferenceMode::Uncorrected };

        let mut enc = RangeEncoder::new();
        let mut self_information = 0.0;
        let mut table_bits = 0.0;
        self.walk(x_tilde, tau, Self::slot_for(tau, mode), None, &mut |x, y, c, pmf| {
            let v = r_hat.get(x, y, c);
            let idx = pmf.index_of(v).expect("quantized residual lies in the alphabet");
            self_information -= pmf.masses()[idx].log2();
            let table = build_freq_table(pmf)?;
            table_bits += table.bits(idx);
            enc.encode(&table, idx);
            Ok(v)
        })?;
        let residual_payload = enc.finish();

        let reconstruction = reconstruct(x_tilde, &r_hat)?;
        let check = verify(x, &reconstruction, tau)?;
        let container = CodedContainer {
            width: x.width() as u32,
            height: x.height() as u32,
            tau,
            bias_correction,
            weights_fingerprint: self.fingerprint,
            lossy_payload: lossy.payload,
            residual_payload,
        };
        let n = x.subpixel_count() as f64;
        let report = EncodeReport {
            bpsp_total: container.byte_len() as f64 * 8.0 / n,
            bpsp_lossy: container.lossy_payload.len() as f64 * 8.0 / n,
            bpsp_residual: container.residual_payload.len() as f64 * 8.0 / n,
            psnr_lossy: psnr(x, x_tilde),
            psnr: check.psnr,
            linf: check.linf,
            self_information_bits: self_information,
            table_bits,
        };
        Ok(Encoded {
            container,
            report,
            reconstruction,
        })
    }

    /// Rebuilds `x̂` from the container alone.
    pub fn decode(&self, c: &CodedContainer) -> Result<Image> {
        if c.weights_fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                container: hex(&c.weights_fingerprint),
                loaded: hex(&self.fingerprint),
            });
        }
        let x_tilde = self.lossy.decode(&c.lossy_payload)?;
        if x_tilde.width() != c.width as usize || x_tilde.height() != c.height as usize {
            return Err(Error::CorruptPayload("lossy payload dimensions differ from header".into()));
        }
        let mode = if c.bias_correction { InferenceMode::Corrected } else { InferenceMode::Uncorrected };
        if c.bias_correction && c.tau.get() == 0 {
            return Err(Error::CorruptPayload("bias correction flag set at tau 0".into()));
        }
        let mut dec = RangeDecoder::new(&c.residual_payload).map_err(truncated)?;
        let r_hat = self.walk(&x_tilde, c.tau, Self::slot_for(c.tau, mode), None, &mut |_, _, _, pmf| {
            let idx = dec.decode(&build_freq_table(pmf)?).map_err(truncated)?;
            Ok(pmf.symbol(idx))
        })?;
        reconstruct(&x_tilde, &r_hat)
    }

    /// Model self-information of r̂ under `mode` without producing a stream.
    pub fn measure(&self, x: &Image, tau: Tau, mode: InferenceMode) -> Result<RateMeasurement> {
        let lossy = self.lossy.encode(x)?;
        let x_tilde = &lossy.reconstruction;
        let r = ResidualPlane::difference(x, x_tilde)?;
        let r_hat = r.quantize(tau);
        let truth = (mode == InferenceMode::Ideal).then_some(&r);
        let mut si = 0.0;
        let mut table_bits = 0.0;
        self.walk(x_tilde, tau, Self::slot_for(tau, mode), truth, &mut |x, y, c, pmf| {
            let v = r_hat.get(x, y, c);
            let idx = pmf.index_of(v).expect("quantized residual lies in the alphabet");
            si -= pmf.masses()[idx].log2();
            table_bits += build_freq_table(pmf)?.bits(idx);
            Ok(v)
        })?;
        let n = x.subpixel_count();
        Ok(RateMeasurement {
            self_information_bits: si,
            table_bits,
            subpixels: n,
            bpsp_lossy: lossy.payload.len() as f64 * 8.0 / n as f64,
            psnr_lossy: psnr(x, x_tilde),
        })
    }
}

fn truncated(e: Error) -> Error {
    match e {
        Error::SourceExhausted => Error::CorruptPayload("truncated residual payload".into()),
        other => other,
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One-shot encode with the default lossy layer.
pub fn encode(x: &Image, tau: Tau, w: &ModelWeights, use_bias_correction: bool) -> Result<(CodedContainer, EncodeReport)> {
    let e = Codec::new(w)?.encode(x, tau, use_bias_correction)?;
    Ok((e.container, e.report))
}

/// One-shot decode with the default lossy layer.
pub fn decode(c: &CodedContainer, w: &ModelWeights) -> Result<Image> {
    Codec::new(w)?.decode(c)
}
