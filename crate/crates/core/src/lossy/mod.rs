//! The lossy layer: any codec that turns an image into a payload plus a
//! reconstruction that the decoder can reproduce bit-exactly from the payload.
//!
//! The default implementation is a classical per-channel 8x8 DCT coder
//! ([`BlockDctCodec`]). Its payload layout is
//!
//! ```text
//! [0..4)   config fingerprint
//! [4..8)   width  (u32 LE)
//! [8..12)  height (u32 LE)
//! then per channel: u32 LE length, channel stream
//! ```
//!
//! A channel stream starts with four 16-entry category histograms (LEB128
//! varints; classes DC difference, zigzag 1-5, 6-20, 21-63) followed by the
//! range-coded blocks in raster order. Each coefficient is coded as its
//! magnitude category under the class table, then a sign bit and
//! `category - 1` mantissa bits.

pub mod dct;

use sha2::{Digest, Sha256};

use crate::coder::{freq_table_from_masses, FreqTable, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::imageio::Image;
use dct::{BLOCK, BLOCK_AREA, ZIGZAG};

/// Name and version of a lossy codec implementation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CodecId {
    pub name: &'static str,
    pub version: u8,
}

/// Encoder-side result: the payload and the reconstruction `x̃` the decoder
/// will derive from it.
#[derive(Clone, Debug)]
pub struct LossyOutput {
    pub payload: Vec<u8>,
    pub reconstruction: Image,
}

pub trait LossyCodec: Send + Sync {
    fn id(&self) -> CodecId;

    fn encode(&self, x: &Image) -> Result<LossyOutput>;

    fn decode(&self, payload: &[u8]) -> Result<Image>;

    /// The reconstruction alone. Must equal `encode(x)?.reconstruction`.
    fn reconstruct(&self, x: &Image) -> Result<Image> {
        Ok(self.encode(x)?.reconstruction)
    }
}

/// Quantization steps of the block transform, one per coefficient band in
/// raster order (`v * 8 + u`).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BlockTransformConfig {
    steps: [u16; BLOCK_AREA],
}

impl Default for BlockTransformConfig {
    /// Steps growing from 7 (DC) to 19 (highest band); lands near 39 dB on
    /// natural 8-bit photographs.
    fn default() -> Self {
        let mut steps = [0u16; BLOCK_AREA];
        for v in 0..BLOCK {
            for u in 0..BLOCK {
                steps[v * BLOCK + u] = 7 + (7 * (u + v) / 8) as u16;
            }
        }
        Self { steps }
    }
}

impl BlockTransformConfig {
    pub fn new(steps: [u16; BLOCK_AREA]) -> Result<Self> {
        if steps.contains(&0) {
            return Err(Error::InvalidArgument("quantization steps must be >= 1".into()));
        }
        Ok(Self { steps })
    }

    /// Same step for every band.
    pub fn uniform(step: u16) -> Result<Self> {
        Self::new([step; BLOCK_AREA])
    }

    pub fn steps(&self) -> &[u16; BLOCK_AREA] {
        &self.steps
    }

    pub fn fingerprint(&self) -> [u8; 4] {
        let mut h = Sha256::new();
        h.update(b"nllc-blockdct-v1");
        for s in &self.steps {
            h.update(s.to_le_bytes());
        }
        let digest = h.finalize();
        [digest[0], digest[1], digest[2], digest[3]]
    }
}

/// Per-channel 8x8 DCT, uniform quantization, range-coded coefficients.
#[derive(Clone, Debug, Default)]
pub struct BlockDctCodec {
    cfg: BlockTransformConfig,
}

impl BlockDctCodec {
    pub fn new(cfg: BlockTransformConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &BlockTransformConfig {
        &self.cfg
    }
}

impl LossyCodec for BlockDctCodec {
    fn id(&self) -> CodecId {
        CodecId {
            name: "block-dct",
            version: 1,
        }
    }

    fn encode(&self, x: &Image) -> Result<LossyOutput> {
        encode_lossy(x, &self.cfg)
    }

    fn decode(&self, payload: &[u8]) -> Result<Image> {
        decode_lossy(payload, &self.cfg)
    }

    fn reconstruct(&self, x: &Image) -> Result<Image> {
        let coefs = quantize_image(x, &self.cfg);
        Ok(reconstruct_image(x.width(), x.height(), &coefs, &self.cfg))
    }
}

/// Quantized coefficients per channel, blocks in raster order, raster
/// coefficient order inside a block.
type Coefficients = [Vec<[i32; BLOCK_AREA]>; 3];

fn blocks_across(len: usize) -> usize {
    len.div_ceil(BLOCK)
}

fn quantize_image(x: &Image, cfg: &BlockTransformConfig) -> Coefficients {
    let (bw, bh) = (blocks_across(x.width()), blocks_across(x.height()));
    std::array::from_fn(|c| {
        let mut out = Vec::with_capacity(bw * bh);
        for by in 0..bh {
            for bx in 0..bw {
                let mut block = [0.0; BLOCK_AREA];
                for y in 0..BLOCK {
                    let sy = (by * BLOCK + y).min(x.height() - 1);
                    for xx in 0..BLOCK {
                        let sx = (bx * BLOCK + xx).min(x.width() - 1);
                        block[y * BLOCK + xx] = f64::from(x.get(sx, sy, c)) - 128.0;
                    }
                }
                let coef = dct::forward(&block);
                let mut q = [0i32; BLOCK_AREA];
                for i in 0..BLOCK_AREA {
                    q[i] = (coef[i] / f64::from(cfg.steps[i])).round() as i32;
                }
                out.push(q);
            }
        }
        out
    })
}

fn reconstruct_image(width: usize, height: usize, coefs: &Coefficients, cfg: &BlockTransformConfig) -> Image {
    let bw = blocks_across(width);
    let mut img = Image::filled(width, height, [0, 0, 0]);
    for (c, blocks) in coefs.iter().enumerate() {
        for (b, q) in blocks.iter().enumerate() {
            let (bx, by) = (b % bw, b / bw);
            let mut coef = [0.0; BLOCK_AREA];
            for i in 0..BLOCK_AREA {
                coef[i] = f64::from(q[i]) * f64::from(cfg.steps[i]);
            }
            let spatial = dct::inverse(&coef);
            for y in 0..BLOCK {
                let py = by * BLOCK + y;
                if py >= height {
                    break;
                }
                for x in 0..BLOCK {
                    let px = bx * BLOCK + x;
                    if px >= width {
                        break;
                    }
                    // f64::round rounds half away from zero
                    let v = (spatial[y * BLOCK + x] + 128.0).round().clamp(0.0, 255.0);
                    img.set(px, py, c, v as u8);
                }
            }
        }
    }
    img
}

const CLASSES: usize = 4;
const CATEGORIES: usize = 16;

fn class_of(zigzag_pos: usize) -> usize {
    match zigzag_pos {
        0 => 0,
        1..=5 => 1,
        6..=20 => 2,
        _ => 3,
    }
}

fn category(v: i32) -> usize {
    (u32::BITS - v.unsigned_abs().leading_zeros()) as usize
}

/// Symbols of one channel in coding order: (class, value).
fn channel_symbols(blocks: &[[i32; BLOCK_AREA]]) -> impl Iterator<Item = (usize, i32)> + '_ {
    let mut prev_dc = 0;
    blocks.iter().flat_map(move |q| {
        let dc_diff = q[0] - prev_dc;
        prev_dc = q[0];
        std::iter::once((0, dc_diff)).chain((1..BLOCK_AREA).map(move |i| (class_of(i), q[ZIGZAG[i]])))
    })
}

fn histogram_tables(hist: &[[u32; CATEGORIES]; CLASSES]) -> Result<Vec<FreqTable>> {
    hist.iter()
        .map(|h| {
            let total: u64 = h.iter().map(|&v| u64::from(v)).sum();
            let masses: Vec<f64> = if total == 0 {
                vec![1.0 / CATEGORIES as f64; CATEGORIES]
            } else {
                h.iter().map(|&v| v as f64 / total as f64).collect()
            };
            freq_table_from_masses(&masses)
        })
        .collect()
}

fn encode_channel(blocks: &[[i32; BLOCK_AREA]]) -> Result<Vec<u8>> {
    let mut hist = [[0u32; CATEGORIES]; CLASSES];
    for (class, v) in channel_symbols(blocks) {
        let cat = category(v);
        if cat >= CATEGORIES {
            return Err(Error::InvalidArgument(format!("coefficient {v} out of range")));
        }
        hist[class][cat] += 1;
    }
    let tables = histogram_tables(&hist)?;
    let mut out = Vec::new();
    for h in &hist {
        for &count in h {
            write_varint(&mut out, count);
        }
    }
    let mut enc = RangeEncoder::new();
    for (class, v) in channel_symbols(blocks) {
        let cat = category(v);
        enc.encode(&tables[class], cat);
        if cat > 0 {
            enc.encode_bits(u32::from(v < 0), 1);
            let mantissa = v.unsigned_abs() - (1 << (cat - 1));
            enc.encode_bits(mantissa, cat as u32 - 1);
        }
    }
    out.extend_from_slice(&enc.finish());
    Ok(out)
}

fn decode_channel(stream: &[u8], n_blocks: usize) -> Result<Vec<[i32; BLOCK_AREA]>> {
    let mut pos = 0;
    let mut hist = [[0u32; CATEGORIES]; CLASSES];
    for h in hist.iter_mut() {
        for count in h.iter_mut() {
            *count = read_varint(stream, &mut pos)?;
        }
    }
    let tables = histogram_tables(&hist)?;
    let mut dec = RangeDecoder::new(&stream[pos..])?;
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut prev_dc = 0;
    for _ in 0..n_blocks {
        let mut q = [0i32; BLOCK_AREA];
        for i in 0..BLOCK_AREA {
            let cat = dec.decode(&tables[class_of(i)])?;
            let mut v = 0i32;
            if cat > 0 {
                let negative = dec.decode_bits(1)? == 1;
                let mantissa = dec.decode_bits(cat as u32 - 1)?;
                v = ((1u32 << (cat - 1)) + mantissa) as i32;
                if negative {
                    v = -v;
                }
            }
            if i == 0 {
                v += prev_dc;
                prev_dc = v;
            }
            q[ZIGZAG[i]] = v;
        }
        blocks.push(q);
    }
    Ok(blocks)
}

fn write_varint(out: &mut Vec<u8>, mut v: u32) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let mut v = 0u32;
    for shift in (0..35).step_by(7) {
        let b = *bytes
            .get(*pos)
            .ok_or_else(|| Error::CorruptPayload("truncated histogram".into()))?;
        *pos += 1;
        v |= u32::from(b & 0x7f).checked_shl(shift).unwrap_or(0);
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::CorruptPayload("overlong varint".into()))
}

pub(crate) fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let chunk = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::CorruptPayload(format!("truncated at byte {}", *pos)))?;
    *pos += 4;
    Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
}

/// Encodes `x` and returns the payload together with `x̃`.
pub fn encode_lossy(x: &Image, cfg: &BlockTransformConfig) -> Result<LossyOutput> {
    let coefs = quantize_image(x, cfg);
    let mut payload = Vec::new();
    payload.extend_from_slice(&cfg.fingerprint());
    payload.extend_from_slice(&(x.width() as u32).to_le_bytes());
    payload.extend_from_slice(&(x.height() as u32).to_le_bytes());
    for blocks in &coefs {
        let stream = encode_channel(blocks)?;
        payload.extend_from_slice(&(stream.len() as u32).to_le_bytes());
        payload.extend_from_slice(&stream);
    }
    let reconstruction = reconstruct_image(x.width(), x.height(), &coefs, cfg);
    Ok(LossyOutput {
        payload,
        reconstruction,
    })
}

pub fn decode_lossy(payload: &[u8], cfg: &BlockTransformConfig) -> Result<Image> {
    let fp = payload
        .get(..4)
        .ok_or_else(|| Error::CorruptPayload("lossy payload shorter than its fingerprint".into()))?;
    if fp != cfg.fingerprint() {
        return Err(Error::CorruptPayload("lossy config fingerprint mismatch".into()));
    }
    let mut pos = 4;
    let width = read_u32(payload, &mut pos)? as usize;
    let height = read_u32(payload, &mut pos)? as usize;
    if width == 0 || height == 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(Error::CorruptPayload(format!("implausible dimensions {width}x{height}")));
    }
    let n_blocks = blocks_across(width) * blocks_across(height);
    let mut coefs: Coefficients = Default::default();
    for channel in coefs.iter_mut() {
        let len = read_u32(payload, &mut pos)? as usize;
        let stream = payload
            .get(pos..pos + len)
            .ok_or_else(|| Error::CorruptPayload("truncated channel stream".into()))?;
        pos += len;
        *channel = decode_channel(stream, n_blocks).map_err(|e| match e {
            Error::SourceExhausted => Error::CorruptPayload("truncated coefficient data".into()),
            other => other,
        })?;
    }
    if pos != payload.len() {
        return Err(Error::CorruptPayload("trailing bytes after lossy payload".into()));
    }
    Ok(reconstruct_image(width, height, &coefs, cfg))
}

/// Degenerate codec whose reconstruction is the per-channel mean colour.
/// Useful for exercising the residual coder with large residuals.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanColorCodec;

impl MeanColorCodec {
    const TAG: [u8; 4] = *b"MEAN";
}

impl LossyCodec for MeanColorCodec {
    fn id(&self) -> CodecId {
        CodecId {
            name: "mean-color",
            version: 1,
        }
    }

    fn encode(&self, x: &Image) -> Result<LossyOutput> {
        let mut sums = [0u64; 3];
        for px in x.data().chunks_exact(3) {
            for c in 0..3 {
                sums[c] += u64::from(px[c]);
            }
        }
        let n = x.pixel_count() as u64;
        let mean: [u8; 3] = std::array::from_fn(|c| ((sums[c] + n / 2) / n) as u8);
        let mut payload = Self::TAG.to_vec();
        payload.extend_from_slice(&(x.width() as u32).to_le_bytes());
        payload.extend_from_slice(&(x.height() as u32).to_le_bytes());
        payload.extend_from_slice(&mean);
        Ok(LossyOutput {
            payload,
            reconstruction: Image::filled(x.width(), x.height(), mean),
        })
    }

    fn decode(&self, payload: &[u8]) -> Result<Image> {
        if payload.len() != 15 || payload[..4] != Self::TAG {
            return Err(Error::CorruptPayload("not a mean-colour payload".into()));
        }
        let mut pos = 4;
        let width = read_u32(payload, &mut pos)? as usize;
        let height = read_u32(payload, &mut pos)? as usize;
        Image::new(width, height, payload[12..15].repeat(width * height))
            .map_err(|e| Error::CorruptPayload(e.to_string()))
    }
}

/// Checks the codec contract on `images`: decoder and encoder
/// reconstructions agree, dimensions are preserved, and encoding is
/// deterministic.
pub fn check_conformance(codec: &dyn LossyCodec, images: &[Image]) -> std::result::Result<(), String> {
    for (i, x) in images.iter().enumerate() {
        let name = codec.id().name;
        let a = codec.encode(x).map_err(|e| format!("{name}: image {i}: encode failed: {e}"))?;
        let b = codec.encode(x).map_err(|e| format!("{name}: image {i}: encode failed: {e}"))?;
        if a.payload != b.payload || a.reconstruction != b.reconstruction {
            return Err(format!("{name}: image {i}: encoding is not deterministic"));
        }
        if a.reconstruction.width() != x.width() || a.reconstruction.height() != x.height() {
            return Err(format!("{name}: image {i}: reconstruction changed dimensions"));
        }
        let decoded = codec
            .decode(&a.payload)
            .map_err(|e| format!("{name}: image {i}: decode failed: {e}"))?;
        if decoded != a.reconstruction {
            return Err(format!("{name}: image {i}: decoder reconstruction differs from encoder"));
        }
        let direct = codec
            .reconstruct(x)
            .map_err(|e| format!("{name}: image {i}: reconstruct failed: {e}"))?;
        if direct != a.reconstruction {
            return Err(format!("{name}: image {i}: reconstruct() differs from encode()"));
        }
    }
    Ok(())
}

/// PSNR in dB with peak 255 over all subpixels; `inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = f64::from(p) - f64::from(q);
            d * d
        })
        .sum::<f64>()
        / a.subpixel_count() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}
