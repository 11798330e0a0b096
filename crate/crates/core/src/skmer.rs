//! (s,k)-mer tokenization: a window of `k` bases taken every `s` bases, read
//! as a base-4 integer with the first base most significant.

use std::thread;

use crate::alphabet::NucleotideStream;
use crate::error::{Error, Result};

pub const MAX_K: u8 = 8;

/// Every (s,k) configuration benchmarked by the original evaluation.
pub const TABLE_PAIRS: [(u8, u8); 10] = [
    (1, 1),
    (1, 2),
    (2, 2),
    (1, 3),
    (2, 3),
    (3, 3),
    (1, 4),
    (2, 4),
    (3, 4),
    (4, 4),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SkParams {
    s: u8,
    k: u8,
}

impl SkParams {
    pub fn new(s: u8, k: u8) -> Result<Self> {
        if s == 0 || k == 0 || s > k || k > MAX_K {
            return Err(Error::InvalidParams(format!(
                "need 1 <= s <= k <= {MAX_K}, got s={s} k={k}"
            )));
        }
        Ok(Self { s, k })
    }

    pub fn s(self) -> usize {
        self.s as usize
    }

    pub fn k(self) -> usize {
        self.k as usize
    }

    /// Alphabet size `4^k`.
    pub fn vocab(self) -> usize {
        1usize << (2 * self.k)
    }

    /// Number of full windows over `n` bases.
    pub fn token_count(self, n: usize) -> usize {
        if n < self.k() {
            0
        } else {
            (n - self.k()) / self.s() + 1
        }
    }

    /// Bases left after the last full window.
    pub fn residual_len(self, n: usize) -> usize {
        match self.token_count(n) {
            0 => n,
            m => n - ((m - 1) * self.s() + self.k()),
        }
    }
}

impl Default for SkParams {
    fn default() -> Self {
        Self { s: 3, k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub residual: Vec<u8>,
    pub params: SkParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapReport {
    Consistent,
    /// First adjacent pair `(j, j+1)` whose shared digits disagree.
    Inconsistent(usize, usize),
}

#[inline]
fn window_value(bases: &[u8]) -> u32 {
    bases.iter().fold(0u32, |acc, &b| (acc << 2) | b as u32)
}

fn encode_range(payload: &[u8], p: SkParams, start: usize, out: &mut [u32]) {
    for (i, slot) in out.iter_mut().enumerate() {
        let at = (start + i) * p.s();
        *slot = window_value(&payload[at..at + p.k()]);
    }
}

/// Tokenizes `stream`. The token index range is split evenly over `workers`
/// threads; the result does not depend on the worker count.
pub fn encode(stream: &NucleotideStream, p: SkParams, workers: usize) -> TokenSequence {
    let n = stream.len();
    let m = p.token_count(n);
    let mut tokens = vec![0u32; m];
    let workers = workers.clamp(1, m.max(1));
    if workers == 1 {
        encode_range(&stream.payload, p, 0, &mut tokens);
    } else {
        let per = m / workers;
        let extra = m % workers;
        thread::scope(|scope| {
            let mut rest = tokens.as_mut_slice();
            let mut start = 0;
            for w in 0..workers {
                let len = per + usize::from(w < extra);
                let (head, tail) = rest.split_at_mut(len);
                rest = tail;
                let payload = &stream.payload;
                scope.spawn(move || encode_range(payload, p, start, head));
                start += len;
            }
        });
    }
    let covered = n - p.residual_len(n);
    TokenSequence {
        tokens,
        residual: stream.payload[covered..].to_vec(),
        params: p,
    }
}

pub fn decode(ts: &TokenSequence) -> Result<NucleotideStream> {
    let p = ts.params;
    let k = p.k();
    let vocab = p.vocab() as u32;
    let mut payload = Vec::with_capacity(ts.tokens.len() * p.s() + k + ts.residual.len());
    let last = ts.tokens.len().wrapping_sub(1);
    for (j, &tok) in ts.tokens.iter().enumerate() {
        if tok >= vocab {
            return Err(Error::TokenOutOfRange {
                token: tok,
                k: k as u8,
            });
        }
        let take = if j == last { k } else { p.s() };
        for i in 0..take {
            payload.push(((tok >> (2 * (k - 1 - i))) & 3) as u8);
        }
    }
    if ts.residual.iter().any(|&b| b > 3) {
        return Err(Error::CorruptStream("residual base out of range".into()));
    }
    payload.extend_from_slice(&ts.residual);
    Ok(NucleotideStream { payload })
}

pub fn overlap_check(ts: &TokenSequence) -> Result<OverlapReport> {
    let p = ts.params;
    if p.s() == p.k() {
        return Err(Error::NotOverlapping);
    }
    let shared = 2 * (p.k() - p.s()) as u32;
    let mask = (1u32 << shared) - 1;
    for (j, pair) in ts.tokens.windows(2).enumerate() {
        // trailing k-s digits of the left window vs leading k-s digits of the right one
        let left = pair[0] & mask;
        let right = pair[1] >> (2 * p.s());
        if left != right {
            return Ok(OverlapReport::Inconsistent(j, j + 1));
        }
    }
    Ok(OverlapReport::Consistent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(s: &[u8]) -> NucleotideStream {
        crate::alphabet::canonicalize(s).0
    }

    fn seq(tokens: Vec<u32>, residual: Vec<u8>, s: u8, k: u8) -> TokenSequence {
        TokenSequence {
            tokens,
            residual,
            params: SkParams::new(s, k).unwrap(),
        }
    }

    #[test]
    fn encode_examples() {
        let p33 = SkParams::new(3, 3).unwrap();
        let ts = encode(&stream(b"CGG"), p33, 1);
        assert_eq!(ts.tokens, vec![26]);
        assert!(ts.residual.is_empty());

        assert_eq!(encode(&stream(b"AAA"), p33, 1).tokens, vec![0]);

        let ts = encode(&stream(b"ACGTAC"), SkParams::new(2, 3).unwrap(), 1);
        assert_eq!(ts.tokens, vec![6, 44]);
        assert_eq!(ts.residual, vec![1]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&seq(vec![26], vec![], 3, 3)).unwrap(), stream(b"CGG"));
        assert_eq!(decode(&seq(vec![], vec![0, 1], 2, 4)).unwrap(), stream(b"AC"));
        assert_eq!(decode(&seq(vec![6, 44], vec![1], 2, 3)).unwrap(), stream(b"ACGTAC"));
        assert!(matches!(
            decode(&seq(vec![64], vec![], 3, 3)),
            Err(Error::TokenOutOfRange { token: 64, .. })
        ));
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(
            overlap_check(&seq(vec![6, 44], vec![], 2, 3)).unwrap(),
            OverlapReport::Consistent
        );
        assert_eq!(
            overlap_check(&seq(vec![6, 0], vec![], 2, 3)).unwrap(),
            OverlapReport::Inconsistent(0, 1)
        );
        assert_eq!(
            overlap_check(&seq(vec![26], vec![], 2, 3)).unwrap(),
            OverlapReport::Consistent
        );
        assert!(matches!(
            overlap_check(&seq(vec![26], vec![], 3, 3)),
            Err(Error::NotOverlapping)
        ));
    }

    #[test]
    fn params_validation() {
        assert!(SkParams::new(4, 3).is_err());
        assert!(SkParams::new(0, 3).is_err());
        assert!(SkParams::new(1, 9).is_err());
        assert!(SkParams::new(8, 8).is_ok());
        for (s, k) in TABLE_PAIRS {
            assert!(SkParams::new(s, k).is_ok());
        }
    }

    #[test]
    fn residual_shorter_than_step() {
        for (s, k) in TABLE_PAIRS {
            let p = SkParams::new(s, k).unwrap();
            for n in 0..40 {
                let m = p.token_count(n);
                let r = p.residual_len(n);
                if m > 0 {
                    assert!(r < p.s(), "n={n} s={s} k={k}");
                } else {
                    assert_eq!(r, n);
                }
            }
        }
    }

    fn brute_force_token(payload: &[u8], start: usize, k: usize) -> u32 {
        (0..k)
            .map(|i| 4u32.pow((k - 1 - i) as u32) * payload[start + i] as u32)
            .sum()
    }

    proptest! {
        #[test]
        fn round_trip_and_oracle(
            payload in proptest::collection::vec(0u8..4, 0..600),
            pair in 0usize..TABLE_PAIRS.len(),
            workers in 1usize..9,
        ) {
            let (s, k) = TABLE_PAIRS[pair];
            let p = SkParams::new(s, k).unwrap();
            let ns = NucleotideStream::new(payload.clone());
            let ts = encode(&ns, p, workers);
            prop_assert_eq!(&ts, &encode(&ns, p, 1));
            for (j, &tok) in ts.tokens.iter().enumerate() {
                prop_assert_eq!(tok, brute_force_token(&payload, j * p.s(), p.k()));
            }
            prop_assert_eq!(decode(&ts).unwrap(), ns);
            if s < k {
                prop_assert_eq!(overlap_check(&ts).unwrap(), OverlapReport::Consistent);
            }
        }
    }
}
