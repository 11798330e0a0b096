use super::rng::Rng;
use super::scalar::Real;
use super::tensor::Tensor;
use crate::checksum::checksum64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model.
///
/// `version` is bumped on every mutation through [`ParamStore::bump`], which
/// lets a backward pass detect that its activations predate an update.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    version: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            version: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = T::from_f64(rng.uniform(-bound, bound));
        }
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        self.tensors[id.0].data()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        self.version += 1;
        self.tensors[id.0].data_mut()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        self.version += 1;
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump(&mut self) {
        self.version += 1;
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    Tensor::from_vec(t.shape(), t.data().iter().map(|v| v.to_f64()).collect())
                        .unwrap()
                })
                .collect(),
            version: self.version,
        }
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T = f32> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        self.tensors[id.0].data_mut()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        self.tensors[id.0].data()
    }

    /// Two distinct gradient tensors at once.
    pub fn get2_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.tensors.split_at_mut(b.0);
            (lo[a.0].data_mut(), hi[0].data_mut())
        } else {
            let (lo, hi) = self.tensors.split_at_mut(a.0);
            (hi[0].data_mut(), lo[b.0].data_mut())
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn is_zero(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|&v| v == T::ZERO))
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"NZWT";

impl ParamStore<f32> {
    /// Manifest of `(name, shape, byte offset)` followed by the raw
    /// little-endian floats and a 64-bit checksum over those float bytes.
    ///
    /// ```text
    /// "NZWT" | count u32 | per tensor: name_len u16, name, ndim u8, dims u32.., offset u64
    ///        | data_len u64 | data | checksum u64
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        let data_start = out.len();
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum64(&out[data_start..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses bytes produced by [`ParamStore::to_bytes`]. Returns the store and
    /// the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::ArchitectureMismatch("not a weight blob".into()));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::ArchitectureMismatch("tensor name is not utf-8".into()))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()?;
            manifest.push((name, shape, offset));
        }
        let data_len = r.u64()? as usize;
        let data = r.take(data_len)?;
        let stored = r.u64()?;
        if checksum64(data) != stored {
            return Err(Error::ChecksumMismatch("weight data".into()));
        }
        let mut store = ParamStore::new();
        let mut expected_offset = 0usize;
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            if offset as usize != expected_offset || expected_offset + 4 * n > data.len() {
                return Err(Error::ArchitectureMismatch(format!(
                    "tensor {name} has inconsistent offset"
                )));
            }
            let vals = data[expected_offset..expected_offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset += 4 * n;
            store.add(name, Tensor::from_vec(&shape, vals)?);
        }
        if expected_offset != data.len() {
            return Err(Error::ArchitectureMismatch("trailing weight data".into()));
        }
        Ok((store, r.pos))
    }

    /// Checks that `other` has the same tensor names and shapes, in order.
    pub fn check_layout(&self, other: &ParamStore<f32>) -> Result<()> {
        if self.names != other.names
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::ArchitectureMismatch(
                "weight manifest does not match the model architecture".into(),
            ));
        }
        Ok(())
    }

    /// Checksum over the raw float bytes.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.num_params() * 4);
        for t in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        checksum64(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::TableInconsistent("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}
