//! Byte stream <-> pure ACGT payload with an exception side channel.
//!
//! Only the four uppercase bases are mapped (A=0, C=1, G=2, T=3). Every other
//! byte, lowercase bases included, is recorded verbatim together with its
//! offset in the original input so that [`restore`] is an exact inverse.

use crate::error::{Error, Result};

/// Base codes in `{0,1,2,3}`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NucleotideStream {
    pub payload: Vec<u8>,
}

impl NucleotideStream {
    pub fn new(payload: Vec<u8>) -> Self {
        debug_assert!(payload.iter().all(|&b| b < 4));
        Self { payload }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exception {
    pub position: u64,
    pub byte: u8,
}

/// Non-ACGT bytes keyed by their offset in the original input, in increasing order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExceptionChannel {
    pub entries: Vec<Exception>,
}

#[inline]
pub fn base_code(byte: u8) -> Option<u8> {
    match byte {
        b'A' => Some(0),
        b'C' => Some(1),
        b'G' => Some(2),
        b'T' => Some(3),
        _ => None,
    }
}

#[inline]
pub fn base_char(code: u8) -> u8 {
    b"ACGT"[(code & 3) as usize]
}

pub fn canonicalize(raw: &[u8]) -> (NucleotideStream, ExceptionChannel) {
    let mut payload = Vec::with_capacity(raw.len());
    let mut entries = Vec::new();
    for (pos, &b) in raw.iter().enumerate() {
        match base_code(b) {
            Some(code) => payload.push(code),
            None => entries.push(Exception {
                position: pos as u64,
                byte: b,
            }),
        }
    }
    (NucleotideStream { payload }, ExceptionChannel { entries })
}

pub fn restore(
    stream: &NucleotideStream,
    exc: &ExceptionChannel,
    original_len: u64,
) -> Result<Vec<u8>> {
    let total = stream.payload.len() as u64 + exc.entries.len() as u64;
    if total != original_len {
        return Err(Error::LengthMismatch(format!(
            "payload {} + exceptions {} != original length {original_len}",
            stream.payload.len(),
            exc.entries.len()
        )));
    }
    let mut out = Vec::with_capacity(original_len as usize);
    let mut bases = stream.payload.iter();
    let mut prev: Option<u64> = None;
    for e in &exc.entries {
        if e.position >= original_len || prev.is_some_and(|p| e.position <= p) {
            return Err(Error::LengthMismatch(format!(
                "exception position {} out of order or out of range",
                e.position
            )));
        }
        if base_code(e.byte).is_some() {
            return Err(Error::LengthMismatch(format!(
                "exception at {} holds a base byte",
                e.position
            )));
        }
        while (out.len() as u64) < e.position {
            // Bounded by the length check above.
            let code = bases.next().ok_or_else(|| {
                Error::LengthMismatch("payload exhausted before exception".into())
            })?;
            out.push(base_char(*code));
        }
        out.push(e.byte);
        prev = Some(e.position);
    }
    out.extend(bases.map(|&c| base_char(c)));
    Ok(out)
}

impl ExceptionChannel {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `count: u64 LE`, then `(position: u64 LE, byte: u8)` per entry.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.entries.len() * 9);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.position.to_le_bytes());
            out.push(e.byte);
        }
        out
    }

    /// Parses a serialized channel from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let corrupt = || Error::TableInconsistent("truncated exception channel".into());
        let count = u64::from_le_bytes(bytes.get(..8).ok_or_else(corrupt)?.try_into().unwrap());
        let need = (count as usize)
            .checked_mul(9)
            .and_then(|n| n.checked_add(8))
            .ok_or_else(corrupt)?;
        if bytes.len() < need {
            return Err(corrupt());
        }
        let entries = bytes[8..need]
            .chunks_exact(9)
            .map(|c| Exception {
                position: u64::from_le_bytes(c[..8].try_into().unwrap()),
                byte: c[8],
            })
            .collect();
        Ok((Self { entries }, need))
    }
}
