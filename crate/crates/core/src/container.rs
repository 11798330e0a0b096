//! Compressed file layout. Little-endian throughout.
//!
//! ```text
//! "PMKL" | version u8 | flags u8 | s u8 | k u8 | t u16 | bs u32 | smp u16 (1/10000)
//! | dm_seed u64 | sprm_seed u64 | spum_hash u64 | original_len u64 | chunk_count u32
//! | model_scale u8
//! | chunk_count × (token_start u64, token_len u64, payload_offset u64, payload_len u64, trailer_len u32)
//! | sprm_len u64 | sprm bytes            (sprm_len 0: no private model)
//! | exception channel                    (count u64, then position u64 + byte per entry)
//! | residual_count u64 | residual bases packed 2 bits each
//! | payloads                             (per chunk: codestream, then raw-token trailer)
//! | checksum u64                         (over every preceding byte)
//! ```

use crate::alphabet::ExceptionChannel;
use crate::checksum::checksum64;
use crate::error::{Error, Result};
use crate::mixer::SelectorFlags;
use crate::models::ModelScale;
use crate::neural::params::ByteReader;
use crate::skmer::SkParams;

pub const MAGIC: &[u8; 4] = b"PMKL";
pub const VERSION: u8 = 1;
const CHUNK_ENTRY_LEN: usize = 36;

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub flags: SelectorFlags,
    pub params: SkParams,
    pub t: u16,
    pub bs: u32,
    /// Snapshot point in ten-thousandths of a chunk; 0 turns model passing off.
    pub smp: u16,
    pub dm_seed: u64,
    pub sprm_seed: u64,
    /// Zero when the public model is unused.
    pub spum_hash: u64,
    pub original_len: u64,
    pub scale: ModelScale,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub token_start: u64,
    pub token_len: u64,
    pub codestream: Vec<u8>,
    pub trailer: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub chunks: Vec<Chunk>,
    pub sprm: Option<Vec<u8>>,
    pub exceptions: ExceptionChannel,
    /// Base codes left over after the last full token window.
    pub residual: Vec<u8>,
}

/// Packs `width`-bit values LSB first.
pub fn pack_bits(values: impl IntoIterator<Item = u32>, width: u32) -> Vec<u8> {
    let mut out = Vec::new();
    let mut acc = 0u64;
    let mut nbits = 0u32;
    for v in values {
        debug_assert!(width == 32 || v < (1 << width));
        acc |= (v as u64) << nbits;
        nbits += width;
        while nbits >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            nbits -= 8;
        }
    }
    if nbits > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], width: u32, count: usize) -> Result<Vec<u32>> {
    let needed = (count * width as usize).div_ceil(8);
    if bytes.len() != needed {
        return Err(Error::TableInconsistent(format!(
            "{count} packed values of {width} bits need {needed} bytes, found {}",
            bytes.len()
        )));
    }
    let mask = if width == 32 { u32::MAX as u64 } else { (1u64 << width) - 1 };
    let mut out = Vec::with_capacity(count);
    let mut acc = 0u64;
    let mut nbits = 0u32;
    let mut it = bytes.iter();
    for _ in 0..count {
        while nbits < width {
            acc |= (*it.next().unwrap() as u64) << nbits;
            nbits += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= width;
        nbits -= width;
    }
    Ok(out)
}

fn table_err(msg: impl Into<String>) -> Error {
    Error::TableInconsistent(msg.into())
}

impl Container {
    pub fn write(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(h.flags.to_bits());
        out.push(h.params.s() as u8);
        out.push(h.params.k() as u8);
        out.extend_from_slice(&h.t.to_le_bytes());
        out.extend_from_slice(&h.bs.to_le_bytes());
        out.extend_from_slice(&h.smp.to_le_bytes());
        out.extend_from_slice(&h.dm_seed.to_le_bytes());
        out.extend_from_slice(&h.sprm_seed.to_le_bytes());
        out.extend_from_slice(&h.spum_hash.to_le_bytes());
        out.extend_from_slice(&h.original_len.to_le_bytes());
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        out.push(h.scale.factor());

        let mut offset = 0u64;
        for c in &self.chunks {
            let len = (c.codestream.len() + c.trailer.len()) as u64;
            out.extend_from_slice(&c.token_start.to_le_bytes());
            out.extend_from_slice(&c.token_len.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&(c.trailer.len() as u32).to_le_bytes());
            offset += len;
        }

        let sprm = self.sprm.as_deref().unwrap_or(&[]);
        out.extend_from_slice(&(sprm.len() as u64).to_le_bytes());
        out.extend_from_slice(sprm);
        out.extend_from_slice(&self.exceptions.to_bytes());
        out.extend_from_slice(&(self.residual.len() as u64).to_le_bytes());
        out.extend_from_slice(&pack_bits(self.residual.iter().map(|&b| b as u32), 2));
        for c in &self.chunks {
            out.extend_from_slice(&c.codestream);
            out.extend_from_slice(&c.trailer);
        }
        let sum = checksum64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 1 {
            return Err(table_err("file shorter than its header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        if bytes.len() < 4 + 1 + 8 {
            return Err(table_err("file shorter than its header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::ChecksumMismatch("container checksum".into()));
        }

        let mut r = ByteReader::new(&body[5..]);
        let flags = SelectorFlags::from_bits(r.u8()?)?;
        let (s, k) = (r.u8()?, r.u8()?);
        let params = SkParams::new(s, k).map_err(|_| table_err(format!("invalid (s,k) = ({s},{k})")))?;
        let t = r.u16()?;
        let bs = r.u32()?;
        let smp = r.u16()?;
        let dm_seed = r.u64()?;
        let sprm_seed = r.u64()?;
        let spum_hash = r.u64()?;
        let original_len = r.u64()?;
        let chunk_count = r.u32()? as usize;
        let scale = ModelScale::new(r.u8()?).map_err(|_| table_err("invalid model scale"))?;
        if t == 0 || bs == 0 || smp > 10_000 {
            return Err(table_err("degenerate coding parameters"));
        }
        if chunk_count.saturating_mul(CHUNK_ENTRY_LEN) > r.rest().len() {
            return Err(table_err("chunk table runs past the end of the file"));
        }

        let mut entries = Vec::with_capacity(chunk_count);
        let mut next_token = 0u64;
        let mut next_offset = 0u64;
        for i in 0..chunk_count {
            let token_start = r.u64()?;
            let token_len = r.u64()?;
            let payload_offset = r.u64()?;
            let payload_len = r.u64()?;
            let trailer_len = r.u32()? as u64;
            if token_start != next_token || payload_offset != next_offset || trailer_len > payload_len {
                return Err(table_err(format!("chunk {i} does not follow its predecessor")));
            }
            next_token = token_start
                .checked_add(token_len)
                .ok_or_else(|| table_err("token range overflow"))?;
            next_offset = payload_offset
                .checked_add(payload_len)
                .ok_or_else(|| table_err("payload range overflow"))?;
            entries.push((token_start, token_len, payload_len, trailer_len));
        }

        let sprm_len = r.u64()? as usize;
        let sprm = (sprm_len > 0).then(|| r.take(sprm_len).map(<[u8]>::to_vec)).transpose()?;
        if sprm.is_some() != flags.sprm {
            return Err(table_err("private model presence disagrees with the flags"));
        }
        let (exceptions, used) = ExceptionChannel::from_bytes(r.rest())?;
        r.take(used)?;
        let residual_count = r.u64()? as usize;
        if residual_count > 4 * r.rest().len() {
            return Err(table_err("residual runs past the end of the file"));
        }
        let packed = r.take((residual_count * 2).div_ceil(8))?;
        let residual = unpack_bits(packed, 2, residual_count)?
            .into_iter()
            .map(|b| b as u8)
            .collect();

        if r.rest().len() as u64 != next_offset {
            return Err(table_err("payload section size disagrees with the chunk table"));
        }
        let mut chunks = Vec::with_capacity(chunk_count);
        for (token_start, token_len, payload_len, trailer_len) in entries {
            let payload = r.take(payload_len as usize)?;
            let (code, trailer) = payload.split_at((payload_len - trailer_len) as usize);
            chunks.push(Chunk {
                token_start,
                token_len,
                codestream: code.to_vec(),
                trailer: trailer.to_vec(),
            });
        }

        Ok(Self {
            header: Header {
                flags,
                params,
                t,
                bs,
                smp,
                dm_seed,
                sprm_seed,
                spum_hash,
                original_len,
                scale,
            },
            chunks,
            sprm,
            exceptions,
            residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::Exception;
    use proptest::prelude::*;

    fn header(flags: SelectorFlags) -> Header {
        Header {
            flags,
            params: SkParams::new(3, 3).unwrap(),
            t: 32,
            bs: 320,
            smp: 500,
            dm_seed: 42,
            sprm_seed: 43,
            spum_hash: 0,
            original_len: 0,
            scale: ModelScale::default(),
        }
    }

    fn sample() -> Container {
        Container {
            header: Header {
                original_len: 30,
                ..header(SelectorFlags {
                    spum: false,
                    sprm: true,
                    dm: true,
                })
            },
            chunks: vec![
                Chunk {
                    token_start: 0,
                    token_len: 5,
                    codestream: vec![1, 2, 3],
                    trailer: vec![9],
                },
                Chunk {
                    token_start: 5,
                    token_len: 4,
                    codestream: vec![4, 5],
                    trailer: vec![],
                },
            ],
            sprm: Some(vec![7; 20]),
            exceptions: ExceptionChannel {
                entries: vec![Exception {
                    position: 3,
                    byte: b'\n',
                }],
            },
            residual: vec![3, 1],
        }
    }

    #[test]
    fn flags_byte_for_public_plus_dynamic() {
        let c = Container {
            header: header(crate::mixer::select_models(1, 2)),
            chunks: vec![],
            sprm: None,
            exceptions: ExceptionChannel::default(),
            residual: vec![],
        };
        assert_eq!(c.write()[5], 0b0000_0101);
    }

    #[test]
    fn empty_container_size() {
        let c = Container {
            header: header(SelectorFlags::DM_ONLY),
            chunks: vec![],
            sprm: None,
            exceptions: ExceptionChannel::default(),
            residual: vec![],
        };
        let bytes = c.write();
        // 53 header + 8 sprm length + 8 exception count + 8 residual count + 8 checksum
        assert_eq!(bytes.len(), 85);
        assert_eq!(Container::read(&bytes).unwrap(), c);
    }

    #[test]
    fn round_trip_sample() {
        let c = sample();
        assert_eq!(Container::read(&c.write()).unwrap(), c);
    }

    #[test]
    fn error_paths() {
        let bytes = sample().write();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::read(&bad), Err(Error::BadMagic)));
        let mut newer = bytes.clone();
        newer[4] = VERSION + 1;
        assert!(matches!(Container::read(&newer), Err(Error::UnsupportedVersion(2))));
        // first byte of the embedded private model
        let sprm_at = 53 + 2 * CHUNK_ENTRY_LEN + 8;
        let mut flipped = bytes.clone();
        flipped[sprm_at] ^= 1;
        assert!(matches!(Container::read(&flipped), Err(Error::ChecksumMismatch(_))));
        for cut in 0..bytes.len() {
            assert!(Container::read(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn inconsistent_table_with_valid_checksum() {
        let mut bytes = sample().write();
        bytes.truncate(bytes.len() - 8);
        // second chunk's token_start
        let at = 53 + CHUNK_ENTRY_LEN;
        bytes[at] = 6;
        let sum = checksum64(&bytes);
        bytes.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(Container::read(&bytes), Err(Error::TableInconsistent(_))));
    }

    #[test]
    fn bit_packing() {
        assert_eq!(pack_bits([1, 2, 3, 0], 2), vec![0b00_11_10_01]);
        assert_eq!(pack_bits([0x3f, 0x01], 6), vec![0x7f, 0x00]);
        assert_eq!(unpack_bits(&[0x7f, 0x00], 6, 2).unwrap(), vec![0x3f, 0x01]);
        assert!(unpack_bits(&[0], 6, 2).is_err());
    }

    proptest! {
        #[test]
        fn fuzzed_round_trip(
            lens in proptest::collection::vec((0u64..1000, 0usize..40, 0usize..5), 0..6),
            sprm in proptest::option::of(proptest::collection::vec(any::<u8>(), 1..64)),
            residual in proptest::collection::vec(0u8..4, 0..8),
            seed in any::<u64>(),
        ) {
            let mut start = 0;
            let chunks: Vec<Chunk> = lens.iter().map(|&(n, code, tr)| {
                let c = Chunk {
                    token_start: start,
                    token_len: n,
                    codestream: (0..code).map(|i| (i as u64 ^ seed) as u8).collect(),
                    trailer: vec![0xAB; tr],
                };
                start += n;
                c
            }).collect();
            let c = Container {
                header: Header {
                    dm_seed: seed,
                    ..header(SelectorFlags { spum: false, sprm: sprm.is_some(), dm: true })
                },
                chunks,
                sprm,
                exceptions: ExceptionChannel::default(),
                residual,
            };
            prop_assert_eq!(Container::read(&c.write()).unwrap(), c);
        }

        #[test]
        fn pack_round_trip(vals in proptest::collection::vec(0u32..(1 << 16), 0..50), width in 16u32..=17) {
            let packed = pack_bits(vals.iter().copied(), width);
            prop_assert_eq!(unpack_bits(&packed, width, vals.len()).unwrap(), vals);
        }
    }
}
