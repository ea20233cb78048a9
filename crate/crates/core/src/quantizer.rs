//! Uniform residual quantization with bin size `2τ + 1`, the matching
//! quantization of probability mass functions, and entropy helpers.

use std::fmt;

use crate::error::{Error, Result};
use crate::imageio::Image;

/// Smallest representable residual (`0 - 255`).
pub const RESIDUAL_MIN: i32 = -255;
/// Largest representable residual (`255 - 0`).
pub const RESIDUAL_MAX: i32 = 255;
/// Size of the full residual alphabet.
pub const RESIDUAL_SYMBOLS: usize = 511;

/// An ℓ∞ error bound in `0..=5`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default)]
pub struct Tau(u8);

impl Tau {
    pub const MAX: u8 = 5;
    pub const LOSSLESS: Tau = Tau(0);

    pub fn new(value: u8) -> Result<Self> {
        if value > Self::MAX {
            return Err(Error::InvalidArgument(format!(
                "error bound {value} outside 0..={}",
                Self::MAX
            )));
        }
        Ok(Self(value))
    }

    /// All bounds `0..=5`.
    pub fn all() -> impl Iterator<Item = Tau> {
        (0..=Self::MAX).map(Tau)
    }

    /// The bounds the conditional estimator is trained for, `1..=5`.
    pub fn conditional() -> impl Iterator<Item = Tau> {
        (1..=Self::MAX).map(Tau)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Quantizer bin size `2τ + 1`.
    pub fn bin(self) -> i32 {
        2 * i32::from(self.0) + 1
    }
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A probability mass function over the arithmetic progression
/// `lo, lo + step, ..., lo + (len - 1) * step`.
#[derive(Clone, PartialEq, Debug)]
pub struct Pmf {
    lo: i32,
    step: i32,
    mass: Vec<f64>,
}

impl Pmf {
    /// Mass tolerance used by [`Pmf::new`].
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(lo: i32, step: i32, mass: Vec<f64>) -> Result<Self> {
        if step < 1 || mass.is_empty() {
            return Err(Error::InvalidArgument("pmf needs a positive step and a non-empty support".into()));
        }
        if let Some(bad) = mass.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(Error::InvalidArgument(format!("pmf mass {bad} is not a finite non-negative number")));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("pmf masses sum to {total}")));
        }
        Ok(Self { lo, step, mass })
    }

    /// Contiguous support starting at `lo`.
    pub fn contiguous(lo: i32, mass: Vec<f64>) -> Result<Self> {
        Self::new(lo, 1, mass)
    }

    /// Builds a pmf without validating normalization. Callers guarantee the
    /// masses are non-negative and sum to one up to rounding.
    pub(crate) fn from_parts_unchecked(lo: i32, step: i32, mass: Vec<f64>) -> Self {
        Self { lo, step, mass }
    }

    pub fn uniform(lo: i32, len: usize) -> Self {
        Self::from_parts_unchecked(lo, 1, vec![1.0 / len as f64; len])
    }

    pub fn lo(&self) -> i32 {
        self.lo
    }

    pub fn step(&self) -> i32 {
        self.step
    }

    pub fn hi(&self) -> i32 {
        self.lo + (self.mass.len() as i32 - 1) * self.step
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Symbol value at support index `idx`.
    pub fn symbol(&self, idx: usize) -> i32 {
        self.lo + idx as i32 * self.step
    }

    /// Support index of `value`, if it lies on the support.
    pub fn index_of(&self, value: i32) -> Option<usize> {
        let off = value - self.lo;
        if off < 0 || off % self.step != 0 {
            return None;
        }
        let idx = (off / self.step) as usize;
        (idx < self.mass.len()).then_some(idx)
    }

    /// Probability of `value` (zero off the support).
    pub fn prob(&self, value: i32) -> f64 {
        self.index_of(value).map_or(0.0, |i| self.mass[i])
    }
}

/// Signed residual plane, channel-interleaved like [`Image`].
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ResidualPlane {
    width: usize,
    height: usize,
    data: Vec<i16>,
}

impl ResidualPlane {
    pub fn new(width: usize, height: usize, data: Vec<i16>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} residual plane needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(RESIDUAL_MIN..=RESIDUAL_MAX).contains(&i32::from(**v))) {
            return Err(Error::InvalidArgument(format!("residual {v} outside [-255, 255]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// `x - x̃`.
    pub fn difference(x: &Image, lossy: &Image) -> Result<Self> {
        check_same_dims(x, lossy)?;
        let data = x
            .data()
            .iter()
            .zip(lossy.data())
            .map(|(&a, &b)| i16::from(a) - i16::from(b))
            .collect();
        Ok(Self {
            width: x.width(),
            height: x.height(),
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> i32 {
        i32::from(self.data[(y * self.width + x) * 3 + c])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: i32) {
        debug_assert!((RESIDUAL_MIN..=RESIDUAL_MAX).contains(&v));
        self.data[(y * self.width + x) * 3 + c] = v as i16;
    }

    /// Elementwise [`quantize_residual`].
    pub fn quantize(&self, tau: Tau) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&r| quantize_residual(i32::from(r), tau) as i16)
                .collect(),
        }
    }
}

pub(crate) fn check_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `sgn(r) (2τ+1) ⌊(|r| + τ) / (2τ+1)⌋`.
#[inline]
pub fn quantize_residual(r: i32, tau: Tau) -> i32 {
    let bin = tau.bin();
    let t = i32::from(tau.get());
    r.signum() * bin * ((r.abs() + t) / bin)
}

/// Largest multiplier `m` such that `±m (2τ+1)` is a quantizer output.
fn alphabet_half_len(tau: Tau) -> i32 {
    (RESIDUAL_MAX + i32::from(tau.get())) / tau.bin()
}

/// The ascending set of quantizer outputs over `[-255, 255]`.
pub fn quantized_alphabet(tau: Tau) -> Vec<i32> {
    let half = alphabet_half_len(tau);
    (-half..=half).map(|m| m * tau.bin()).collect()
}

/// Number of symbols in [`quantized_alphabet`].
pub fn alphabet_len(tau: Tau) -> usize {
    (2 * alphabet_half_len(tau) + 1) as usize
}

/// Index of a quantized residual within [`quantized_alphabet`].
#[inline]
pub fn alphabet_index(value: i32, tau: Tau) -> usize {
    debug_assert_eq!(value % tau.bin(), 0);
    (value / tau.bin() + alphabet_half_len(tau)) as usize
}

/// Sums the fine-grained pmf over each quantizer bin
/// `[r̂ - τ, r̂ + τ] ∩ [-255, 255]`.
pub fn quantize_pmf(p: &Pmf, tau: Tau) -> Result<Pmf> {
    if p.lo() != RESIDUAL_MIN || p.step() != 1 || p.len() != RESIDUAL_SYMBOLS {
        return Err(Error::SupportMismatch(format!(
            "expected the residual support [-255, 255], got [{}, {}] step {}",
            p.lo(),
            p.hi(),
            p.step()
        )));
    }
    Ok(quantize_masses(p.masses(), tau))
}

/// [`quantize_pmf`] on a raw 511-entry mass slice.
pub(crate) fn quantize_masses(mass: &[f64], tau: Tau) -> Pmf {
    debug_assert_eq!(mass.len(), RESIDUAL_SYMBOLS);
    if tau.get() == 0 {
        return Pmf::from_parts_unchecked(RESIDUAL_MIN, 1, mass.to_vec());
    }
    let t = i32::from(tau.get());
    let half = alphabet_half_len(tau);
    let out = (-half..=half)
        .map(|m| {
            let centre = m * tau.bin();
            let lo = (centre - t).max(RESIDUAL_MIN);
            let hi = (centre + t).min(RESIDUAL_MAX);
            (lo..=hi).map(|v| mass[(v - RESIDUAL_MIN) as usize]).sum()
        })
        .collect();
    Pmf::from_parts_unchecked(-half * tau.bin(), tau.bin(), out)
}

/// Shannon entropy in bits with `0 log 0 = 0`.
pub fn entropy_bits(p: &Pmf) -> f64 {
    -p.masses()
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| m * m.log2())
        .sum::<f64>()
}

/// `clamp(x̃ + r̂, 0, 255)`.
#[inline]
pub fn reconstruct_pixel(lossy: u8, quantized: i32) -> u8 {
    (i32::from(lossy) + quantized).clamp(0, 255) as u8
}

/// Applies [`reconstruct_pixel`] over a whole image.
pub fn reconstruct(lossy: &Image, quantized: &ResidualPlane) -> Result<Image> {
    if lossy.width() != quantized.width() || lossy.height() != quantized.height() {
        return Err(Error::DimensionMismatch("lossy image vs residual plane".into()));
    }
    let data = lossy
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(&l, &q)| reconstruct_pixel(l, i32::from(q)))
        .collect();
    Image::new(lossy.width(), lossy.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau(v: u8) -> Tau {
        Tau::new(v).unwrap()
    }

    #[test]
    fn quantizer_examples() {
        for t in Tau::all() {
            assert_eq!(quantize_residual(0, t), 0);
        }
        assert_eq!(quantize_residual(2, tau(1)), 3);
        assert_eq!(quantize_residual(-4, tau(2)), -5);
        assert_eq!(quantize_residual(255, tau(3)), 252);
        assert!(Tau::new(6).is_err());
    }

    #[test]
    fn alphabets_match_enumeration() {
        for t in Tau::all() {
            let mut seen: Vec<i32> = (RESIDUAL_MIN..=RESIDUAL_MAX)
                .map(|r| quantize_residual(r, t))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(quantized_alphabet(t), seen, "tau {t}");
            assert_eq!(alphabet_len(t), seen.len());
            for (i, &v) in seen.iter().enumerate() {
                assert_eq!(alphabet_index(v, t), i);
                assert_eq!(v % t.bin(), 0);
            }
        }
        assert_eq!(alphabet_len(tau(0)), 511);
        assert_eq!(alphabet_len(tau(1)), 171);
        assert_eq!(quantized_alphabet(tau(2)).first(), Some(&-255));
        assert_eq!(quantized_alphabet(tau(2)).last(), Some(&255));
    }

    #[test]
    fn pmf_quantization_examples() {
        let mut mass = vec![0.0; RESIDUAL_SYMBOLS];
        for v in -1..=1 {
            mass[(v - RESIDUAL_MIN) as usize] = 1.0 / 3.0;
        }
        let p = Pmf::contiguous(RESIDUAL_MIN, mass).unwrap();
        assert_eq!(quantize_pmf(&p, tau(0)).unwrap(), p);
        let q = quantize_pmf(&p, tau(1)).unwrap();
        assert!((q.prob(0) - 1.0).abs() < 1e-15);
        assert_eq!(q.len(), 171);

        let short = Pmf::uniform(-3, 7);
        assert!(matches!(quantize_pmf(&short, tau(1)), Err(Error::SupportMismatch(_))));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy_bits(&Pmf::uniform(0, 4)) - 2.0).abs() < 1e-15);
        let point = Pmf::contiguous(0, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy_bits(&point), 0.0);
        let p = Pmf::contiguous(0, vec![0.5, 0.25, 0.25]).unwrap();
        assert!((entropy_bits(&p) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_examples() {
        assert_eq!(reconstruct_pixel(100, 3), 103);
        assert_eq!(reconstruct_pixel(254, 3), 255);
        assert_eq!(reconstruct_pixel(1, -3), 0);
    }

    #[test]
    fn clamping_never_violates_the_bound() {
        for t in Tau::all() {
            for x in 0..=255i32 {
                for lossy in 0..=255i32 {
                    let r = x - lossy;
                    let q = quantize_residual(r, t);
                    let out = i32::from(reconstruct_pixel(lossy as u8, q));
                    let unclamped = lossy + q;
                    assert!((x - out).abs() <= i32::from(t.get()));
                    assert!((x - out).abs() <= (x - unclamped).abs());
                }
            }
        }
    }

    #[test]
    fn pmf_validation() {
        assert!(Pmf::contiguous(0, vec![0.5, 0.4]).is_err());
        assert!(Pmf::contiguous(0, vec![1.5, -0.5]).is_err());
        let p = Pmf::new(-6, 3, vec![0.25, 0.5, 0.25]).unwrap();
        assert_eq!(p.hi(), 0);
        assert_eq!(p.index_of(-3), Some(1));
        assert_eq!(p.index_of(-4), None);
    }
}
