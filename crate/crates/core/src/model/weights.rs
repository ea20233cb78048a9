//! Parameter tensors, initialization, and the weights file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "NLLW" | version u8 | tensor count u32
//! per tensor: name len u8 | name | ndim u8 | dims u32... | values f64...
//! 32-byte SHA-256 over everything after the version byte
//! ```

use std::io::Write;
use std::ops::{Index, IndexMut};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{CTX_CHANNELS, FEAT_CHANNELS, HEAD_OUT, HIDDEN, K, SIGMA_INIT_PRE};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NLLW";
const VERSION: u8 = 1;

/// Number of conditioned τ values (1..=5).
pub const COND_TAUS: usize = 5;

/// Width of the masked context kernel.
pub const CTX_KERNEL: usize = 5;

/// Taps `0..CAUSAL_TAPS` of the raster-ordered 5x5 kernel are causal: the two
/// rows above and the two pixels to the left.
pub const CAUSAL_TAPS: usize = 12;

macro_rules! params {
    ($($variant:ident => $name:literal, [$($dim:expr),+];)+) => {
        /// Every trainable tensor.
        #[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
        pub enum Param { $($variant),+ }

        impl Param {
            pub const ALL: &'static [Param] = &[$(Param::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $(Param::$variant => $name),+ }
            }

            pub fn shape(self) -> &'static [usize] {
                match self { $(Param::$variant => &[$($dim),+]),+ }
            }
        }
    };
}

params! {
    FeatW1 => "feat.w1", [FEAT_CHANNELS, 3, 3, 3];
    FeatB1 => "feat.b1", [FEAT_CHANNELS];
    FeatW2 => "feat.w2", [FEAT_CHANNELS, FEAT_CHANNELS, 3, 3];
    FeatB2 => "feat.b2", [FEAT_CHANNELS];
    CtxW => "ctx.w", [CTX_CHANNELS, 3, CTX_KERNEL, CTX_KERNEL];
    CtxB => "ctx.b", [CTX_CHANNELS];
    EstW1 => "est.w1", [HIDDEN, FEAT_CHANNELS + CTX_CHANNELS];
    EstB1 => "est.b1", [HIDDEN];
    EstW2 => "est.w2", [HIDDEN, HIDDEN];
    EstB2 => "est.b2", [HIDDEN];
    HeadW => "est.head.w", [HEAD_OUT, HIDDEN];
    HeadB => "est.head.b", [HEAD_OUT];
    CondW1 => "cond.w1", [HIDDEN, FEAT_CHANNELS + CTX_CHANNELS];
    CondB1 => "cond.b1", [HIDDEN];
    CondW2 => "cond.w2", [HIDDEN, HIDDEN];
    CondB2 => "cond.b2", [HIDDEN];
    CondHeadW => "cond.head.w", [HEAD_OUT, HIDDEN];
    CondHeadB => "cond.head.b", [HEAD_OUT];
    CondScale1 => "cond.scale1", [COND_TAUS, HIDDEN];
    CondShift1 => "cond.shift1", [COND_TAUS, HIDDEN];
    CondScale2 => "cond.scale2", [COND_TAUS, HIDDEN];
    CondShift2 => "cond.shift2", [COND_TAUS, HIDDEN];
    CondScaleHead => "cond.scale_head", [COND_TAUS, HEAD_OUT];
    CondShiftHead => "cond.shift_head", [COND_TAUS, HEAD_OUT];
}

impl Param {
    pub fn len(self) -> usize {
        self.shape().iter().product()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Tensors of the τ-conditioned estimator; the only ones the bias loss
    /// updates.
    pub fn is_conditional(self) -> bool {
        self.name().starts_with("cond.")
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.iter().copied().find(|p| p.name() == name)
    }
}

/// Whether flat index `i` of `ctx.w` is a causal tap.
pub fn is_causal_ctx_index(i: usize) -> bool {
    i % (CTX_KERNEL * CTX_KERNEL) < CAUSAL_TAPS
}

macro_rules! tensor_set {
    ($(#[$meta:meta])* $ty:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Debug)]
        pub struct $ty {
            data: Vec<Vec<f64>>,
        }

        impl $ty {
            pub fn zeros() -> Self {
                Self {
                    data: Param::ALL.iter().map(|p| vec![0.0; p.len()]).collect(),
                }
            }

            pub fn iter(&self) -> impl Iterator<Item = (Param, &[f64])> {
                Param::ALL.iter().map(move |&p| (p, self.data[p.index()].as_slice()))
            }

            pub fn parameter_count(&self) -> usize {
                self.data.iter().map(Vec::len).sum()
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().flatten().all(|v| v.is_finite())
            }
        }

        impl Index<Param> for $ty {
            type Output = [f64];
            fn index(&self, p: Param) -> &[f64] {
                &self.data[p.index()]
            }
        }

        impl IndexMut<Param> for $ty {
            fn index_mut(&mut self, p: Param) -> &mut [f64] {
                &mut self.data[p.index()]
            }
        }
    };
}

tensor_set! {
    /// All network parameters.
    ModelWeights
}

tensor_set! {
    /// One gradient tensor per parameter tensor.
    GradientSet
}

impl GradientSet {
    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= k);
    }

    /// Two distinct tensors at once; `a` must precede `b` in [`Param::ALL`].
    pub(crate) fn pair_mut(&mut self, a: Param, b: Param) -> (&mut [f64], &mut [f64]) {
        let (i, j) = (a.index(), b.index());
        assert!(i < j);
        let (lo, hi) = self.data.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    }

    pub fn max_abs(&self, p: Param) -> f64 {
        self[p].iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl ModelWeights {
    /// Seeded initialization: uniform fan-in scaling, zeroed mask, small head,
    /// and a conditional estimator that starts as an identity-conditioned copy
    /// of the plain one.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros();
        let mut fill = |w: &mut Self, p: Param, fan_in: usize, gain: f64| {
            let a = gain * (3.0 / fan_in as f64).sqrt();
            for v in w[p].iter_mut() {
                *v = rng.gen_range(-a..a);
            }
        };
        fill(&mut w, Param::FeatW1, 27, 1.0);
        fill(&mut w, Param::FeatW2, FEAT_CHANNELS * 9, 1.0);
        fill(&mut w, Param::CtxW, 3 * CAUSAL_TAPS, 1.0);
        fill(&mut w, Param::EstW1, FEAT_CHANNELS + CTX_CHANNELS, 1.0);
        fill(&mut w, Param::EstW2, HIDDEN, 1.0);
        fill(&mut w, Param::HeadW, HIDDEN, 0.1);
        w.zero_masked_taps();
        let head_b = &mut w[Param::HeadB];
        for c in 0..3 {
            for k in 0..K {
                head_b[K * 3 + c * K + k] = k as f64 - (K / 2) as f64;
                head_b[2 * K * 3 + c * K + k] = SIGMA_INIT_PRE;
            }
        }
        w.reset_conditional();
        w
    }

    /// Copies the plain estimator into the conditional one and resets the
    /// per-τ scales to 1 and shifts to 0.
    pub fn reset_conditional(&mut self) {
        for (src, dst) in [
            (Param::EstW1, Param::CondW1),
            (Param::EstB1, Param::CondB1),
            (Param::EstW2, Param::CondW2),
            (Param::EstB2, Param::CondB2),
            (Param::HeadW, Param::CondHeadW),
            (Param::HeadB, Param::CondHeadB),
        ] {
            let v = self[src].to_vec();
            self[dst].copy_from_slice(&v);
        }
        for p in [Param::CondScale1, Param::CondScale2, Param::CondScaleHead] {
            self[p].fill(1.0);
        }
        for p in [Param::CondShift1, Param::CondShift2, Param::CondShiftHead] {
            self[p].fill(0.0);
        }
    }

    pub fn zero_masked_taps(&mut self) {
        for (i, v) in self[Param::CtxW].iter_mut().enumerate() {
            if !is_causal_ctx_index(i) {
                *v = 0.0;
            }
        }
    }

    /// Fails if any masked context tap is nonzero.
    pub fn check_mask(&self) -> Result<()> {
        match self[Param::CtxW]
            .iter()
            .enumerate()
            .find(|&(i, v)| !is_causal_ctx_index(i) && *v != 0.0)
        {
            Some((i, _)) => Err(Error::InvalidWeights(format!(
                "masked context tap {i} is nonzero"
            ))),
            None => Ok(()),
        }
    }

    fn tensor_table(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.parameter_count() * 8 + 1024);
        out.extend_from_slice(&(Param::ALL.len() as u32).to_le_bytes());
        for (p, values) in self.iter() {
            out.push(p.name().len() as u8);
            out.extend_from_slice(p.name().as_bytes());
            out.push(p.shape().len() as u8);
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over the serialized tensor table.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.tensor_table()).into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let table = self.tensor_table();
        let digest: [u8; 32] = Sha256::digest(&table).into();
        let mut out = Vec::with_capacity(table.len() + 37);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&table);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, used) = Self::read_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::InvalidWeights("trailing bytes after weights".into()));
        }
        Ok(w)
    }

    /// Parses a weights block at the start of `bytes` and returns it together
    /// with the number of bytes consumed.
    pub(crate) fn read_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let mut r = Reader { bytes, pos: 5 };
        let count = r.u32()? as usize;
        let mut w = Self::zeros();
        let mut seen = vec![false; Param::ALL.len()];
        for _ in 0..count {
            let name_len = r.u8()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::InvalidWeights("tensor name is not UTF-8".into()))?;
            let p = Param::from_name(name)
                .ok_or_else(|| Error::InvalidWeights(format!("unknown tensor {name}")))?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            if dims != p.shape() {
                return Err(Error::InvalidWeights(format!(
                    "tensor {name} has shape {dims:?}, expected {:?}",
                    p.shape()
                )));
            }
            for v in w[p].iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
            seen[p.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidWeights(format!(
                "missing tensor {}",
                Param::ALL[i].name()
            )));
        }
        let table_end = r.pos;
        let stored = r.take(32)?;
        let digest: [u8; 32] = Sha256::digest(&bytes[5..table_end]).into();
        if stored != digest {
            return Err(Error::InvalidWeights("content hash mismatch".into()));
        }
        Ok((w, r.pos))
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

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::InvalidWeights(format!("truncated at byte {}", self.pos))),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_masked() {
        let a = ModelWeights::init(7);
        assert_eq!(a, ModelWeights::init(7));
        assert_ne!(a, ModelWeights::init(8));
        a.check_mask().unwrap();
        assert_eq!(a[Param::CondW2], a[Param::EstW2]);
        assert!(a[Param::CondScaleHead].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn causal_taps() {
        let causal: Vec<usize> = (0..25).filter(|&i| is_causal_ctx_index(i)).collect();
        assert_eq!(causal, (0..12).collect::<Vec<_>>());
        assert!(is_causal_ctx_index(25));
        assert!(!is_causal_ctx_index(25 + 12));
    }

    #[test]
    fn corrupted_mask_is_reported() {
        let mut w = ModelWeights::init(1);
        w[Param::CtxW][12] = 0.5;
        assert!(matches!(w.check_mask(), Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn file_roundtrip_and_tamper_detection() {
        let w = ModelWeights::init(3);
        let bytes = w.to_bytes();
        let back = ModelWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.fingerprint(), w.fingerprint());

        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(ModelWeights::from_bytes(&bad).is_err());
        assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(ModelWeights::from_bytes(b"XXXX\x01"), Err(Error::BadMagic)));
    }

    #[test]
    fn shapes_are_consistent() {
        let w = ModelWeights::zeros();
        for (p, v) in w.iter() {
            assert_eq!(v.len(), p.shape().iter().product::<usize>());
        }
        assert_eq!(Param::ALL.len(), 24);
        assert!(Param::CondShiftHead.is_conditional());
        assert!(!Param::HeadW.is_conditional());
    }
}
