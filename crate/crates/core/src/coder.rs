//! Range coder over 16-bit quantized distributions.
//!
//! 32-bit range, byte-wise renormalization once the range drops below 2^24,
//! carry propagation through a cached byte plus a run of pending 0xFF bytes.
//! Interval boundaries are `floor(range * cum / 2^16)`, computed in 64 bits,
//! so the only coding loss is one unit of `range` per symbol.

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedDistribution {
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl QuantizedDistribution {
    pub fn from_freqs(freqs: Vec<u32>) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::InvalidDistribution(
                "frequencies must be non-empty and >= 1".into(),
            ));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freqs {
            acc += f as u64;
            if acc > PROB_TOTAL as u64 {
                break;
            }
            cum.push(acc as u32);
        }
        if acc != PROB_TOTAL as u64 {
            return Err(Error::InvalidDistribution(format!(
                "frequencies sum to {acc}, expected {PROB_TOTAL}"
            )));
        }
        Ok(Self { freqs, cum })
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn width(&self) -> usize {
        self.freqs.len()
    }

    /// Ideal code length of `sym` in bits.
    pub fn cost_bits(&self, sym: usize) -> f64 {
        -(self.freqs[sym] as f64 / PROB_TOTAL as f64).log2()
    }

    fn symbol_for(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Converts a probability vector into integer frequencies summing to 2^16.
///
/// Each entry starts at `max(1, floor(p * 2^16))`. A deficit is handed out one
/// unit at a time in order of decreasing fractional remainder; a surplus (from
/// the clamp) is taken back one unit at a time from entries above 1 in order of
/// increasing remainder. Ties go to the lower symbol index.
pub fn quantize(p: &[f32]) -> Result<QuantizedDistribution> {
    let width = p.len();
    if width == 0 || width > PROB_TOTAL as usize {
        return Err(Error::InvalidDistribution(format!(
            "width {width} outside 1..=65536"
        )));
    }
    let mut sum = 0f64;
    for &x in p {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::InvalidDistribution(format!("entry {x}")));
        }
        sum += x as f64;
    }
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }

    let total = PROB_TOTAL as f64;
    let mut freqs = Vec::with_capacity(width);
    let mut rems = Vec::with_capacity(width);
    let mut assigned = 0i64;
    for &x in p {
        let scaled = x as f64 * total;
        let fl = scaled.floor();
        let f = (fl as i64).clamp(1, PROB_TOTAL as i64);
        freqs.push(f as u32);
        rems.push(scaled - fl);
        assigned += f;
    }

    let target = PROB_TOTAL as i64;
    match assigned.cmp(&target) {
        Ordering::Equal => {}
        Ordering::Less => {
            let mut order: Vec<usize> = (0..width).collect();
            order.sort_by(|&a, &b| rems[b].total_cmp(&rems[a]).then(a.cmp(&b)));
            let mut deficit = target - assigned;
            for &i in order.iter().cycle() {
                if deficit == 0 {
                    break;
                }
                freqs[i] += 1;
                deficit -= 1;
            }
        }
        Ordering::Greater => {
            let mut order: Vec<usize> = (0..width).filter(|&i| freqs[i] > 1).collect();
            order.sort_by(|&a, &b| rems[a].total_cmp(&rems[b]).then(a.cmp(&b)));
            let mut surplus = assigned - target;
            while surplus > 0 {
                let mut progressed = false;
                for &i in &order {
                    if surplus == 0 {
                        break;
                    }
                    if freqs[i] > 1 {
                        freqs[i] -= 1;
                        surplus -= 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    return Err(Error::InvalidDistribution(
                        "cannot give every symbol a frequency".into(),
                    ));
                }
            }
        }
    }
    QuantizedDistribution::from_freqs(freqs)
}

/// Near-equal frequencies over `width` symbols; the first `2^16 mod width`
/// symbols get one extra unit.
pub fn uniform_dist(width: usize) -> QuantizedDistribution {
    assert!(width >= 1 && width <= PROB_TOTAL as usize);
    let base = PROB_TOTAL / width as u32;
    let extra = (PROB_TOTAL % width as u32) as usize;
    let freqs = (0..width).map(|i| base + u32::from(i < extra)).collect();
    QuantizedDistribution::from_freqs(freqs).expect("uniform frequencies are valid")
}

#[inline]
fn bound(range: u32, cum: u32) -> u32 {
    ((range as u64 * cum as u64) >> PROB_BITS) as u32
}

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                // The very first cached byte is provably zero; it is not emitted.
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                }
                self.started = true;
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, dist: &QuantizedDistribution, sym: usize) {
        let lo = bound(self.range, dist.cum[sym]);
        let hi = bound(self.range, dist.cum[sym + 1]);
        self.low += lo as u64;
        self.range = hi - lo;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn bytes_so_far(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            input,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or(Error::StreamExhausted)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, dist: &QuantizedDistribution) -> Result<usize> {
        if self.code >= self.range {
            return Err(Error::CorruptStream("code outside coding interval".into()));
        }
        // largest c with floor(range * c / T) <= code
        let target =
            (((self.code as u64 + 1) << PROB_BITS) - 1) / self.range as u64;
        let target = target.min(PROB_TOTAL as u64 - 1) as u32;
        let sym = dist.symbol_for(target);
        let lo = bound(self.range, dist.cum[sym]);
        let hi = bound(self.range, dist.cum[sym + 1]);
        self.code -= lo;
        self.range = hi - lo;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(sym)
    }

    /// True when every byte of the stream has been consumed.
    pub fn is_exhausted(&self) -> bool {
        self.pos == self.input.len()
    }
}
