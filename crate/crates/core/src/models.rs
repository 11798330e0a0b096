//! The three predictors: the static public model (SPuM), the static private
//! model (SPrM) and the dynamic model (DM). Each maps a context of `t` tokens
//! to logits over the `4^k` token alphabet.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::checksum::checksum64;
use crate::error::{Error, Result};
use crate::neural::layers::{AttentionCache, BiGruCache, FfnCache};
use crate::neural::params::ByteReader;
use crate::neural::{Attention, BiGru, Embedding, Ffn, Grads, Linear, ParamId, ParamStore, Real, Rng};
use crate::skmer::SkParams;

/// Power-of-two divisor applied to every layer width. `1` gives the full-size
/// models; the default of 4 keeps runs tractable on a desktop CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelScale(u8);

impl ModelScale {
    pub const FULL: ModelScale = ModelScale(1);
    pub const MAX: u8 = 32;

    pub fn new(factor: u8) -> Result<Self> {
        if factor == 0 || !factor.is_power_of_two() || factor > Self::MAX {
            return Err(Error::ConfigInvalid(format!(
                "scale factor must be a power of two in 1..={}, got {factor}",
                Self::MAX
            )));
        }
        Ok(Self(factor))
    }

    pub fn factor(self) -> u8 {
        self.0
    }

    fn apply(self, dim: usize) -> usize {
        (dim / self.0 as usize).max(1)
    }
}

impl Default for ModelScale {
    fn default() -> Self {
        Self(4)
    }
}

/// Shape of a BiGRU predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StaticArch {
    pub vocab: usize,
    pub t: usize,
    pub emb: usize,
    pub hidden: usize,
    pub lin: usize,
    pub layers: usize,
}

impl StaticArch {
    /// 16-d embedding, two BiGRU layers of 128 per direction, 128-wide head.
    pub fn public(vocab: usize, t: usize, scale: ModelScale) -> Self {
        Self {
            vocab,
            t,
            emb: scale.apply(16),
            hidden: scale.apply(128),
            lin: scale.apply(128),
            layers: 2,
        }
    }

    /// Same as the public model with a single BiGRU layer.
    pub fn private(vocab: usize, t: usize, scale: ModelScale) -> Self {
        Self {
            layers: 1,
            ..Self::public(vocab, t, scale)
        }
    }
}

/// Shape of the attention predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynamicArch {
    pub vocab: usize,
    pub t: usize,
    pub emb: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl DynamicArch {
    /// 64-d embedding, 8-head attention with hidden size 256, 4096-wide FFN.
    pub fn new(vocab: usize, t: usize, scale: ModelScale) -> Self {
        let hidden = scale.apply(256);
        Self {
            vocab,
            t,
            emb: scale.apply(64),
            hidden,
            heads: 8.min(hidden),
            ffn: scale.apply(4096),
        }
    }
}

fn check_contexts(contexts: &[u32], batch: usize, t: usize, vocab: usize) -> Result<()> {
    if contexts.len() != batch * t {
        return Err(Error::ContextLengthMismatch {
            expected: batch * t,
            got: contexts.len(),
        });
    }
    if let Some(&bad) = contexts.iter().find(|&&c| c as usize >= vocab) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            k: (vocab.trailing_zeros() / 2) as u8,
        });
    }
    Ok(())
}

/// Embedding → BiGRU stack → tanh linear → dense logits.
///
/// The head reads the final state of each direction of the top BiGRU layer:
/// the forward pass at the last position and the reverse pass at the first.
#[derive(Debug)]
pub struct StaticModel<T = f32> {
    pub arch: StaticArch,
    pub store: ParamStore<T>,
    emb: Embedding,
    grus: Vec<BiGru>,
    lin: Linear,
    out: Linear,
    forward_calls: AtomicU64,
}

impl<T: Real> Clone for StaticModel<T> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch,
            store: self.store.clone(),
            emb: self.emb,
            grus: self.grus.clone(),
            lin: self.lin,
            out: self.out,
            forward_calls: AtomicU64::new(0),
        }
    }
}

#[derive(Debug)]
pub struct StaticTape<T> {
    version: u64,
    batch: usize,
    contexts: Vec<u32>,
    gru_caches: Vec<BiGruCache<T>>,
    finals: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Real> StaticModel<T> {
    pub fn new(arch: StaticArch, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, &mut rng, "emb", arch.vocab, arch.emb);
        let mut grus = Vec::with_capacity(arch.layers);
        for l in 0..arch.layers {
            let n_in = if l == 0 { arch.emb } else { 2 * arch.hidden };
            grus.push(BiGru::new(&mut store, &mut rng, &format!("gru{l}"), n_in, arch.hidden));
        }
        let lin = Linear::new(&mut store, &mut rng, "lin", 2 * arch.hidden, arch.lin);
        let out = Linear::new(&mut store, &mut rng, "out", arch.lin, arch.vocab);
        Self {
            arch,
            store,
            emb,
            grus,
            lin,
            out,
            forward_calls: AtomicU64::new(0),
        }
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// `contexts` holds `batch` rows of `t` tokens; returns `[batch, vocab]` logits.
    pub fn forward(&self, contexts: &[u32], batch: usize) -> Result<(Vec<T>, StaticTape<T>)> {
        let a = self.arch;
        check_contexts(contexts, batch, a.t, a.vocab)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = self.emb.forward(&self.store, contexts);
        let mut gru_caches = Vec::with_capacity(self.grus.len());
        for g in &self.grus {
            let (y, c) = g.forward(&self.store, &x, batch, a.t);
            x = y;
            gru_caches.push(c);
        }
        let h = a.hidden;
        let mut finals = Vec::with_capacity(batch * 2 * h);
        for b in 0..batch {
            let last = (b * a.t + a.t - 1) * 2 * h;
            let first = b * a.t * 2 * h;
            finals.extend_from_slice(&x[last..last + h]);
            finals.extend_from_slice(&x[first + h..first + 2 * h]);
        }
        let mut hidden = self.lin.forward(&self.store, &finals, batch);
        for v in hidden.iter_mut() {
            *v = v.tanh();
        }
        let logits = self.out.forward(&self.store, &hidden, batch);
        let tape = StaticTape {
            version: self.store.version(),
            batch,
            contexts: contexts.to_vec(),
            gru_caches,
            finals,
            hidden,
        };
        Ok((logits, tape))
    }

    pub fn predict(&self, contexts: &[u32], batch: usize) -> Result<Vec<T>> {
        Ok(self.forward(contexts, batch)?.0)
    }

    pub fn backward(&self, tape: &StaticTape<T>, dlogits: &[T]) -> Result<Grads<T>> {
        if tape.version != self.store.version() {
            return Err(Error::StaleTape);
        }
        let a = self.arch;
        let batch = tape.batch;
        if dlogits.len() != batch * a.vocab {
            return Err(Error::ShapeMismatch("logit gradient width".into()));
        }
        let mut grads = self.store.zero_grads();
        let mut dh = self
            .out
            .backward(&self.store, &mut grads, &tape.hidden, dlogits, batch, true)
            .unwrap();
        for (g, &y) in dh.iter_mut().zip(&tape.hidden) {
            *g *= T::ONE - y * y;
        }
        let dfinal = self
            .lin
            .backward(&self.store, &mut grads, &tape.finals, &dh, batch, true)
            .unwrap();
        let h = a.hidden;
        let mut dx = vec![T::ZERO; batch * a.t * 2 * h];
        for b in 0..batch {
            let last = (b * a.t + a.t - 1) * 2 * h;
            let first = b * a.t * 2 * h;
            let df = &dfinal[b * 2 * h..(b + 1) * 2 * h];
            dx[last..last + h].copy_from_slice(&df[..h]);
            dx[first + h..first + 2 * h].copy_from_slice(&df[h..]);
        }
        for (g, c) in self.grus.iter().zip(&tape.gru_caches).rev() {
            dx = g.backward(&self.store, &mut grads, c, &dx);
        }
        self.emb.backward(&mut grads, &tape.contexts, &dx);
        Ok(grads)
    }
}

/// Token + learned positional embedding → one attention block (last query) with
/// residual → FFN with residual → dense logits.
#[derive(Debug)]
pub struct DynamicModel<T = f32> {
    pub arch: DynamicArch,
    pub store: ParamStore<T>,
    tok: Embedding,
    pos: ParamId,
    attn: Attention,
    ffn: Ffn,
    head: Linear,
    forward_calls: AtomicU64,
}

impl<T: Real> Clone for DynamicModel<T> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch,
            store: self.store.clone(),
            tok: self.tok,
            pos: self.pos,
            attn: self.attn,
            ffn: self.ffn,
            head: self.head,
            forward_calls: AtomicU64::new(0),
        }
    }
}

#[derive(Debug)]
pub struct DynamicTape<T> {
    version: u64,
    batch: usize,
    contexts: Vec<u32>,
    attn: AttentionCache<T>,
    ffn: FfnCache<T>,
    h2: Vec<T>,
}

impl<T: Real> DynamicModel<T> {
    pub fn new(arch: DynamicArch, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let tok = Embedding::new(&mut store, &mut rng, "tok_emb", arch.vocab, arch.emb);
        let pos = store.add_uniform(
            "pos_emb.weight",
            &[arch.t, arch.emb],
            1.0 / (arch.emb as f64).sqrt(),
            &mut rng,
        );
        let attn = Attention::new(&mut store, &mut rng, "attn", arch.emb, arch.hidden, arch.heads);
        let ffn = Ffn::new(&mut store, &mut rng, "ffn", arch.emb, arch.ffn);
        let head = Linear::new(&mut store, &mut rng, "head", arch.emb, arch.vocab);
        Self {
            arch,
            store,
            tok,
            pos,
            attn,
            ffn,
            head,
            forward_calls: AtomicU64::new(0),
        }
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn forward(&self, contexts: &[u32], batch: usize) -> Result<(Vec<T>, DynamicTape<T>)> {
        let a = self.arch;
        check_contexts(contexts, batch, a.t, a.vocab)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let d = a.emb;
        let mut x = self.tok.forward(&self.store, contexts);
        let pos = self.store.get(self.pos);
        for row in x.chunks_exact_mut(a.t * d) {
            for (v, &p) in row.iter_mut().zip(pos) {
                *v += p;
            }
        }
        let (att, attn) = self.attn.forward(&self.store, &x, batch, a.t);
        let mut h1 = att;
        for b in 0..batch {
            let last = (b * a.t + a.t - 1) * d;
            for (v, &xv) in h1[b * d..(b + 1) * d].iter_mut().zip(&x[last..last + d]) {
                *v += xv;
            }
        }
        let (f, ffn) = self.ffn.forward(&self.store, &h1, batch);
        let mut h2 = h1;
        for (v, &fv) in h2.iter_mut().zip(&f) {
            *v += fv;
        }
        let logits = self.head.forward(&self.store, &h2, batch);
        let tape = DynamicTape {
            version: self.store.version(),
            batch,
            contexts: contexts.to_vec(),
            attn,
            ffn,
            h2,
        };
        Ok((logits, tape))
    }

    pub fn predict(&self, contexts: &[u32], batch: usize) -> Result<Vec<T>> {
        Ok(self.forward(contexts, batch)?.0)
    }

    pub fn backward(&self, tape: &DynamicTape<T>, dlogits: &[T]) -> Result<Grads<T>> {
        if tape.version != self.store.version() {
            return Err(Error::StaleTape);
        }
        let a = self.arch;
        let (batch, d) = (tape.batch, a.emb);
        if dlogits.len() != batch * a.vocab {
            return Err(Error::ShapeMismatch("logit gradient width".into()));
        }
        let mut grads = self.store.zero_grads();
        let dh2 = self
            .head
            .backward(&self.store, &mut grads, &tape.h2, dlogits, batch, true)
            .unwrap();
        let mut dh1 = self.ffn.backward(&self.store, &mut grads, &tape.ffn, &dh2);
        for (g, &r) in dh1.iter_mut().zip(&dh2) {
            *g += r;
        }
        let mut dx = self.attn.backward(&self.store, &mut grads, &tape.attn, &dh1);
        for b in 0..batch {
            let last = (b * a.t + a.t - 1) * d;
            for (g, &r) in dx[last..last + d].iter_mut().zip(&dh1[b * d..(b + 1) * d]) {
                *g += r;
            }
        }
        {
            let dpos = grads.get_mut(self.pos);
            for row in dx.chunks_exact(a.t * d) {
                for (g, &v) in dpos.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        self.tok.backward(&mut grads, &tape.contexts, &dx);
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticKind {
    Public = 0,
    Private = 1,
}

const MODEL_MAGIC: &[u8; 4] = b"NZSM";
const MODEL_VERSION: u8 = 1;

/// A static model together with the tokenization it was trained for.
#[derive(Debug, Clone)]
pub struct StaticModelFile {
    pub kind: StaticKind,
    pub params: SkParams,
    pub seed: u64,
    pub model: StaticModel<f32>,
}

impl StaticModelFile {
    /// ```text
    /// "NZSM" | version u8 | kind u8 | s u8 | k u8 | t u16 | emb u16 | hidden u16
    ///        | lin u16 | layers u8 | seed u64 | weight blob
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = self.model.arch;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.push(self.kind as u8);
        out.push(self.params.s() as u8);
        out.push(self.params.k() as u8);
        for v in [a.t, a.emb, a.hidden, a.lin] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.push(a.layers as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.model.store.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let arch_err = |m: &str| Error::ArchitectureMismatch(m.to_string());
        if r.take(4).map_err(|_| arch_err("truncated model file"))? != MODEL_MAGIC {
            return Err(arch_err("not a model file"));
        }
        if r.u8()? != MODEL_VERSION {
            return Err(arch_err("unsupported model file version"));
        }
        let kind = match r.u8()? {
            0 => StaticKind::Public,
            1 => StaticKind::Private,
            _ => return Err(arch_err("unknown model kind")),
        };
        let (s, k) = (r.u8()?, r.u8()?);
        let params = SkParams::new(s, k).map_err(|_| arch_err("invalid (s,k) in model file"))?;
        let t = r.u16()? as usize;
        let emb = r.u16()? as usize;
        let hidden = r.u16()? as usize;
        let lin = r.u16()? as usize;
        let layers = r.u8()? as usize;
        let seed = r.u64()?;
        let (store, used) = ParamStore::from_bytes(r.rest())?;
        if r.pos + used != bytes.len() {
            return Err(arch_err("trailing bytes after model weights"));
        }
        if t == 0 || emb == 0 || hidden == 0 || lin == 0 || layers == 0 || layers > 4 {
            return Err(arch_err("degenerate model dimensions"));
        }
        let arch = StaticArch {
            vocab: params.vocab(),
            t,
            emb,
            hidden,
            lin,
            layers,
        };
        let mut model = StaticModel::new(arch, 0);
        model.store.check_layout(&store)?;
        model.store = store;
        Ok(Self {
            kind,
            params,
            seed,
            model,
        })
    }

    pub fn hash(&self) -> u64 {
        checksum64(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Confirms the model was built for `params` and context length `t`.
    pub fn check_compatible(&self, params: SkParams, t: usize) -> Result<()> {
        if self.params.k() != params.k() || self.model.arch.t != t {
            return Err(Error::ArchitectureMismatch(format!(
                "model expects k={} t={}, stream uses k={} t={t}",
                self.params.k(),
                self.model.arch.t,
                params.k()
            )));
        }
        Ok(())
    }
}

/// Initial SPrM weights: embedding and first BiGRU layer copied from the public
/// model, head re-initialized from `seed`.
pub fn derive_sprm_init(spum: &StaticModel<f32>, seed: u64) -> StaticModel<f32> {
    let arch = StaticArch {
        layers: 1,
        ..spum.arch
    };
    let mut sprm = StaticModel::new(arch, seed);
    let names: Vec<String> = sprm.store.names().to_vec();
    for name in names {
        if !(name.starts_with("emb.") || name.starts_with("gru0.")) {
            continue;
        }
        if let (Some(src), Some(dst)) = (spum.store.id_of(&name), sprm.store.id_of(&name)) {
            let vals = spum.store.get(src).to_vec();
            sprm.store.get_mut(dst).copy_from_slice(&vals);
        }
    }
    sprm
}

/// Everything the predictor stack needs besides the per-worker dynamic state.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spum: Option<Arc<StaticModelFile>>,
    pub sprm: Option<Arc<StaticModelFile>>,
    pub dm_arch: DynamicArch,
    pub dm_seed: u64,
    pub params: SkParams,
    pub t: usize,
}

impl ModelBundle {
    pub fn spum_hash(&self) -> Option<u64> {
        self.spum.as_ref().map(|m| m.hash())
    }

    pub fn fresh_dm(&self) -> DynamicModel<f32> {
        DynamicModel::new(self.dm_arch, self.dm_seed)
    }
}

/// Assembles a bundle. The public model is read only when a path is given; the
/// private model is parsed only when its serialized form is present.
pub fn load_bundle(
    spum_file: Option<&Path>,
    sprm_bytes: Option<&[u8]>,
    dm_seed: u64,
    params: SkParams,
    t: usize,
    scale: ModelScale,
) -> Result<ModelBundle> {
    let spum = match spum_file {
        Some(p) => {
            let m = StaticModelFile::load(p)?;
            m.check_compatible(params, t)?;
            Some(Arc::new(m))
        }
        None => None,
    };
    let sprm = match sprm_bytes {
        Some(b) => {
            let m = StaticModelFile::from_bytes(b)?;
            m.check_compatible(params, t)?;
            Some(Arc::new(m))
        }
        None => None,
    };
    Ok(ModelBundle {
        spum,
        sprm,
        dm_arch: DynamicArch::new(params.vocab(), t, scale),
        dm_seed,
        params,
        t,
    })
}
