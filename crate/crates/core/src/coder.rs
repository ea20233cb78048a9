//! Integer range coder over 16-bit cumulative frequency tables.
//!
//! The coder keeps a 32-bit range and renormalizes one byte at a time. Carries
//! out of the low register are resolved with a cached byte plus a run of
//! pending `0xff` bytes, so the stream needs no escape symbols and the decoder
//! consumes exactly the bytes the encoder produced.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::quantizer::Pmf;

/// Frequency tables sum to `1 << PRECISION_BITS`.
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

const TOP: u32 = 1 << 24;

/// Cumulative frequencies `c[0] = 0 < c[1] < ... < c[n] = 2^16`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    #[inline]
    pub fn cum(&self, s: usize) -> u32 {
        self.cum[s]
    }

    pub fn freqs(&self) -> Vec<u32> {
        self.cum.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Ideal code length of symbol `s` under this table.
    pub fn bits(&self, s: usize) -> f64 {
        f64::from(PRECISION_BITS) - f64::from(self.freq(s)).log2()
    }

    /// Builds a table from explicit frequencies that already sum to `2^16`.
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::InvalidArgument("frequencies must be non-empty and positive".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            acc += u64::from(f);
            cum.push(acc.min(u64::from(u32::MAX)) as u32);
        }
        if acc != u64::from(TOTAL_FREQ) {
            return Err(Error::InvalidArgument(format!("frequencies sum to {acc}, expected {TOTAL_FREQ}")));
        }
        Ok(Self { cum })
    }

    /// Uniform binary table used for raw bits.
    pub fn binary() -> Self {
        Self {
            cum: vec![0, TOTAL_FREQ / 2, TOTAL_FREQ],
        }
    }

    #[inline]
    fn find(&self, target: u32) -> usize {
        // last s with cum[s] <= target
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Quantizes a pmf to a [`FreqTable`].
pub fn build_freq_table(p: &Pmf) -> Result<FreqTable> {
    freq_table_from_masses(p.masses())
}

/// Scales masses by `2^16`, floors, lifts every symbol to at least 1, then
/// settles the remaining deficit or surplus over the
/// symbols in descending-mass order (ties by ascending index). A deficit is
/// handed out one unit per symbol, cycling as needed; a surplus is taken from
/// the most probable symbols first, each kept at 1 or more.
pub fn freq_table_from_masses(mass: &[f64]) -> Result<FreqTable> {
    let n = mass.len();
    if n == 0 || n > TOTAL_FREQ as usize {
        return Err(Error::AlphabetTooLarge(n));
    }
    let clean = |m: f64| if m.is_finite() && m > 0.0 { m } else { 0.0 };
    let mut freq: Vec<u32> = mass
        .iter()
        .map(|&m| {
            let scaled = (clean(m) * f64::from(TOTAL_FREQ)).floor();
            (scaled.min(f64::from(TOTAL_FREQ)) as u32).max(1)
        })
        .collect();
    let total: i64 = freq.iter().map(|&f| i64::from(f)).sum();
    let order = |a: &usize, b: &usize| -> Ordering {
        clean(mass[*b]).total_cmp(&clean(mass[*a])).then(a.cmp(b))
    };

    match total.cmp(&i64::from(TOTAL_FREQ)) {
        Ordering::Equal => {}
        Ordering::Less => {
            let mut deficit = (i64::from(TOTAL_FREQ) - total) as usize;
            let rounds = deficit / n;
            if rounds > 0 {
                freq.iter_mut().for_each(|f| *f += rounds as u32);
                deficit -= rounds * n;
            }
            if deficit > 0 {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.select_nth_unstable_by(deficit - 1, order);
                for &s in &idx[..deficit] {
                    freq[s] += 1;
                }
            }
        }
        Ordering::Greater => {
            let mut surplus = (total - i64::from(TOTAL_FREQ)) as u32;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_unstable_by(order);
            for s in idx {
                let take = surplus.min(freq[s] - 1);
                freq[s] -= take;
                surplus -= take;
                if surplus == 0 {
                    break;
                }
            }
        }
    }
    FreqTable::from_freqs(&freq)
}

/// Range encoder writing into an owned byte buffer.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    // The very first cached byte is always zero and is never written.
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            started: false,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &FreqTable, s: usize) {
        assert!(s < table.len(), "symbol {s} outside a {}-symbol table", table.len());
        self.encode_range(table.cum(s), table.freq(s));
    }

    /// Encodes `bits` low-order bits of `value`, most significant first.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        let half = TOTAL_FREQ / 2;
        for i in (0..bits).rev() {
            let bit = (value >> i) & 1;
            self.encode_range(bit * half, half);
        }
    }

    fn encode_range(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PRECISION_BITS;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xff00_0000 || self.low > 0xffff_ffff {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                }
                self.started = true;
                byte = 0xff;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xff) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00ff_ffff) << 8;
    }

    /// Bytes emitted so far (excluding the final flush).
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

/// Range decoder over a borrowed byte slice.
#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or(Error::SourceExhausted)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = (self.code / r).min(TOTAL_FREQ - 1);
        let s = table.find(target);
        self.consume(r, table.cum(s), table.freq(s))?;
        Ok(s)
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let half = TOTAL_FREQ / 2;
        let mut value = 0;
        for _ in 0..bits {
            let r = self.range >> PRECISION_BITS;
            let bit = u32::from(self.code / r >= half);
            self.consume(r, bit * half, half)?;
            value = (value << 1) | bit;
        }
        Ok(value)
    }

    fn consume(&mut self, r: u32, cum: u32, freq: u32) -> Result<()> {
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(())
    }

    /// True once every input byte has been consumed.
    pub fn is_at_end(&self) -> bool {
        self.pos == self.input.len()
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}
