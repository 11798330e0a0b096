//! Compression and decompression drivers.
//!
//! The token stream is cut into `W` contiguous chunks, one per worker. Inside a
//! chunk the tokens are laid out as `bs` contiguous substreams of `L` tokens;
//! batch step `j` codes position `j` of every substream with one model call.
//! The first `t` positions are coded under the uniform distribution. Tokens
//! that do not fill a whole substream row are stored raw in the chunk trailer.
//!
//! Worker `i+1` starts from a snapshot of worker `i`'s adaptive state taken a
//! fixed fraction of the way through chunk `i` (model passing). Decompression
//! replays exactly the same chain, so the snapshots are re-derived rather
//! than stored.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use crate::alphabet::{canonicalize, restore, NucleotideStream};
use crate::checksum::checksum64;
use crate::coder::{quantize, uniform_dist, Decoder, Encoder, QuantizedDistribution};
use crate::container::{pack_bits, unpack_bits, Chunk, Container, Header};
use crate::error::{Error, Result};
use crate::mixer::{controller_step, select_models, AdaptiveState, Predictor, SelectorFlags};
use crate::models::{DynamicArch, ModelBundle, ModelScale, StaticModelFile};
use crate::skmer::{decode, encode, SkParams, TokenSequence};
use crate::training::{pretrain_sprm, TrainConfig};

pub const DEFAULT_T: usize = 32;
pub const DEFAULT_BS: usize = 320;
pub const DEFAULT_SMP_FRACTION: f64 = 0.05;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone)]
pub struct CompressConfig {
    pub params: SkParams,
    pub t: usize,
    pub bs: usize,
    /// Requested chunk count; also the number of threads.
    pub workers: usize,
    /// Fraction of a chunk's model steps after which its state is passed on.
    /// Zero turns model passing off.
    pub smp_fraction: f64,
    pub selector_threshold: u64,
    pub seed: u64,
    pub scale: ModelScale,
    pub spum: Option<Arc<StaticModelFile>>,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            params: SkParams::new(3, 3).unwrap(),
            t: DEFAULT_T,
            bs: DEFAULT_BS,
            workers: 1,
            smp_fraction: DEFAULT_SMP_FRACTION,
            selector_threshold: crate::mixer::DEFAULT_THRESHOLD_BYTES,
            seed: DEFAULT_SEED,
            scale: ModelScale::default(),
            spum: None,
        }
    }
}

impl CompressConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.t == 0 || self.t > u16::MAX as usize {
            return bad(format!("t must be in 1..=65535, got {}", self.t));
        }
        if self.bs == 0 || self.bs > u32::MAX as usize {
            return bad(format!("bs must be positive, got {}", self.bs));
        }
        if self.workers == 0 {
            return bad("at least one worker is required".into());
        }
        if !(0.0..1.0).contains(&self.smp_fraction) {
            return bad(format!("smp fraction must be in [0, 1), got {}", self.smp_fraction));
        }
        if self.selector_threshold == 0 {
            return bad("selector threshold must be positive".into());
        }
        if let Some(m) = &self.spum {
            m.check_compatible(self.params, self.t)
                .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        }
        Ok(())
    }

    fn smp_units(&self) -> u16 {
        (self.smp_fraction * 10_000.0).round() as u16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPlan {
    /// `(start, len)` in tokens.
    pub ranges: Vec<(usize, usize)>,
    pub bs: usize,
    pub t: usize,
    pub smp_fraction: f64,
}

/// Splits `token_count` tokens into at most `w` near-equal chunks, earlier
/// chunks taking the remainder. `w` shrinks until every chunk holds at least
/// `bs·(t+1)` tokens; `bs` then shrinks so each substream gets at least one
/// modelled step.
pub fn plan_chunks(token_count: usize, w: usize, bs: usize, t: usize, smp_fraction: f64) -> ChunkPlan {
    let bs = bs.max(1);
    if token_count == 0 {
        return ChunkPlan {
            ranges: vec![],
            bs,
            t,
            smp_fraction,
        };
    }
    let w_max = (token_count / (bs * (t + 1))).max(1);
    let w = w.clamp(1, w_max);
    let base = token_count / w;
    let rem = token_count % w;
    let mut ranges = Vec::with_capacity(w);
    let mut start = 0;
    for i in 0..w {
        let len = base + usize::from(i < rem);
        ranges.push((start, len));
        start += len;
    }
    let min_len = base;
    let bs = bs.min((min_len / (t + 1)).max(1));
    ChunkPlan {
        ranges,
        bs,
        t,
        smp_fraction,
    }
}

/// Instrumentation for one chunk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChunkReport {
    /// Hash of the state received from the previous worker.
    pub inbound_hash: Option<u64>,
    /// Hash of the state snapshot taken in this chunk.
    pub snapshot_hash: Option<u64>,
    pub snapshot_step: usize,
    /// Mean loss per token (nats) of every model step.
    pub step_loss: Vec<f64>,
    pub uniform_coded: u64,
    pub raw_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub flags: Option<SelectorFlags>,
    pub token_count: usize,
    pub chunks: Vec<ChunkReport>,
    pub spum_forward_calls: u64,
    pub sprm_forward_calls: u64,
}

impl RunReport {
    pub fn uniform_coded(&self) -> u64 {
        self.chunks.iter().map(|c| c.uniform_coded).sum()
    }

    pub fn snapshot_hashes(&self) -> Vec<u64> {
        self.chunks.iter().filter_map(|c| c.snapshot_hash).collect()
    }

    pub fn handoffs(&self) -> usize {
        self.chunks.iter().filter(|c| c.inbound_hash.is_some()).count()
    }
}

enum SymbolIo<'a> {
    Enc(Encoder),
    Dec(Decoder<'a>),
}

impl SymbolIo<'_> {
    #[inline]
    fn code(&mut self, dist: &QuantizedDistribution, tok: &mut u32) -> Result<()> {
        match self {
            SymbolIo::Enc(e) => e.encode(dist, *tok as usize),
            SymbolIo::Dec(d) => *tok = d.decode(dist)? as u32,
        }
        Ok(())
    }
}

/// Model steps after which the snapshot is taken, in ten-thousandths.
fn snapshot_step(smp: u16, model_steps: usize) -> usize {
    (smp as usize * model_steps).div_ceil(10_000)
}

/// Everything needed to code any chunk of one stream: models, flags and the
/// fixed coding parameters.
pub struct Session {
    pub bundle: ModelBundle,
    pub flags: SelectorFlags,
    pub bs: usize,
    pub t: usize,
    /// Snapshot point in ten-thousandths.
    pub smp: u16,
    /// Whether snapshots are taken and handed on.
    pub pass_on: bool,
}

impl Session {
    /// Rebuilds the session a container was written with. The public model
    /// must be the one whose hash the header records.
    pub fn from_container(c: &Container, spum: Option<Arc<StaticModelFile>>) -> Result<Self> {
        let h = &c.header;
        let t = h.t as usize;
        let spum = if h.flags.spum {
            let m = spum.ok_or(Error::SpumMissing)?;
            if m.hash() != h.spum_hash {
                return Err(Error::ChecksumMismatch(format!(
                    "public model hash {:016x} does not match the container's {:016x}",
                    m.hash(),
                    h.spum_hash
                )));
            }
            m.check_compatible(h.params, t)?;
            Some(m)
        } else {
            None
        };
        let sprm = match &c.sprm {
            Some(b) => {
                let m = StaticModelFile::from_bytes(b)?;
                m.check_compatible(h.params, t)?;
                Some(Arc::new(m))
            }
            None => None,
        };
        Ok(Self {
            bundle: ModelBundle {
                spum,
                sprm,
                dm_arch: DynamicArch::new(h.params.vocab(), t, h.scale),
                dm_seed: h.dm_seed,
                params: h.params,
                t,
            },
            flags: h.flags,
            bs: h.bs as usize,
            t,
            smp: h.smp,
            pass_on: h.smp > 0 && c.chunks.len() > 1,
        })
    }

    fn width(&self) -> u32 {
        2 * self.bundle.params.k() as u32
    }

    /// Codes (or decodes, filling `buf`) the `bs·L` substream tokens of one
    /// chunk. `handoff` receives the snapshot when model passing is on.
    fn run(
        &self,
        buf: &mut [u32],
        io: &mut SymbolIo,
        inbound: Option<Vec<u8>>,
        handoff: Option<mpsc::Sender<Vec<u8>>>,
        report: &mut ChunkReport,
    ) -> Result<()> {
        let (bs, t) = (self.bs, self.t);
        let l = buf.len() / bs;
        let vocab = self.bundle.params.vocab();
        let predictor = Predictor::new(self.flags, &self.bundle)?;
        let mut state = match inbound {
            Some(bytes) => {
                report.inbound_hash = Some(checksum64(&bytes));
                AdaptiveState::restore(&self.bundle, &bytes)?
            }
            None => AdaptiveState::from_bundle(&self.bundle),
        };
        let model_steps = l.saturating_sub(t);
        let snap_at = snapshot_step(self.smp, model_steps);
        report.snapshot_step = snap_at;
        let mut handoff = handoff;
        let mut take_snapshot = |state: &AdaptiveState, report: &mut ChunkReport| {
            if !self.pass_on {
                return;
            }
            let bytes = state.snapshot();
            report.snapshot_hash = Some(checksum64(&bytes));
            if let Some(tx) = handoff.take() {
                // a vanished receiver means that worker already failed
                let _ = tx.send(bytes);
            }
        };
        if snap_at == 0 {
            take_snapshot(&state, report);
        }

        let uniform = uniform_dist(vocab);
        let mut ctx = vec![0u32; bs * t];
        let mut targets = vec![0u32; bs];
        let mut done = 0usize;
        for j in 0..l {
            if j < t {
                for r in 0..bs {
                    io.code(&uniform, &mut buf[r * l + j])?;
                }
                report.uniform_coded += bs as u64;
                continue;
            }
            for r in 0..bs {
                ctx[r * t..(r + 1) * t].copy_from_slice(&buf[r * l + j - t..r * l + j]);
            }
            let pred = predictor.predict(&state, &ctx, bs)?;
            for r in 0..bs {
                let dist = quantize(&pred.probs[r * vocab..(r + 1) * vocab])?;
                io.code(&dist, &mut buf[r * l + j])?;
                targets[r] = buf[r * l + j];
            }
            let loss = controller_step(&mut state, pred, &targets)?;
            report.step_loss.push(loss / bs as f64);
            done += 1;
            if done == snap_at {
                take_snapshot(&state, report);
            }
        }
        Ok(())
    }

    fn encode_inner(
        &self,
        tokens: &[u32],
        token_start: usize,
        inbound: Option<Vec<u8>>,
        handoff: Option<mpsc::Sender<Vec<u8>>>,
    ) -> Result<(Chunk, ChunkReport)> {
        let len = tokens.len();
        let coded = (len / self.bs) * self.bs;
        let mut buf = tokens[..coded].to_vec();
        let mut io = SymbolIo::Enc(Encoder::new());
        let mut report = ChunkReport {
            raw_tokens: (len - coded) as u64,
            ..Default::default()
        };
        self.run(&mut buf, &mut io, inbound, handoff, &mut report)?;
        let SymbolIo::Enc(enc) = io else { unreachable!() };
        let chunk = Chunk {
            token_start: token_start as u64,
            token_len: len as u64,
            codestream: enc.finish(),
            trailer: pack_bits(tokens[coded..].iter().copied(), self.width()),
        };
        Ok((chunk, report))
    }

    fn decode_inner(
        &self,
        chunk: &Chunk,
        inbound: Option<Vec<u8>>,
        handoff: Option<mpsc::Sender<Vec<u8>>>,
    ) -> Result<(Vec<u32>, ChunkReport)> {
        let len = chunk.token_len as usize;
        let coded = (len / self.bs) * self.bs;
        let mut buf = vec![0u32; coded];
        let mut io = SymbolIo::Dec(Decoder::new(&chunk.codestream)?);
        let mut report = ChunkReport {
            raw_tokens: (len - coded) as u64,
            ..Default::default()
        };
        self.run(&mut buf, &mut io, inbound, handoff, &mut report)?;
        buf.extend(unpack_bits(&chunk.trailer, self.width(), len - coded)?);
        Ok((buf, report))
    }

    /// Codes one chunk on its own, starting from `inbound` (or the seeded
    /// initial state). Also returns the snapshot it would hand on.
    pub fn encode_chunk(
        &self,
        tokens: &[u32],
        token_start: usize,
        inbound: Option<Vec<u8>>,
    ) -> Result<(Chunk, ChunkReport, Option<Vec<u8>>)> {
        let (tx, rx) = mpsc::channel();
        let (chunk, report) = self.encode_inner(tokens, token_start, inbound, Some(tx))?;
        Ok((chunk, report, rx.try_recv().ok()))
    }

    /// Decodes one chunk on its own; see [`Session::encode_chunk`].
    pub fn decode_chunk(
        &self,
        chunk: &Chunk,
        inbound: Option<Vec<u8>>,
    ) -> Result<(Vec<u32>, ChunkReport, Option<Vec<u8>>)> {
        let (tx, rx) = mpsc::channel();
        let (tokens, report) = self.decode_inner(chunk, inbound, Some(tx))?;
        Ok((tokens, report, rx.try_recv().ok()))
    }

    fn forward_calls(&self) -> (u64, u64) {
        (
            self.bundle.spum.as_ref().map_or(0, |m| m.model.forward_calls()),
            self.bundle.sprm.as_ref().map_or(0, |m| m.model.forward_calls()),
        )
    }
}

/// Runs `work(i, inbound, handoff)` for every chunk on `threads` threads.
/// Chunks are claimed in ascending order; chunk `i+1` blocks until chunk `i`
/// has sent its snapshot.
fn run_chain<T: Send>(
    count: usize,
    threads: usize,
    pass_on: bool,
    work: impl Fn(usize, Option<Vec<u8>>, Option<mpsc::Sender<Vec<u8>>>) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let mut senders = Vec::with_capacity(count);
    let mut receivers = Vec::with_capacity(count);
    for _ in 0..count {
        let (tx, rx) = mpsc::channel();
        senders.push(Mutex::new(Some(tx)));
        receivers.push(Mutex::new(Some(rx)));
    }
    let results: Vec<Mutex<Option<Result<T>>>> = (0..count).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, count.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let outcome = (|| {
                    let inbound = if pass_on && i > 0 {
                        let rx = receivers[i].lock().unwrap().take().unwrap();
                        Some(rx.recv().map_err(|_| {
                            Error::CorruptStream(format!("chunk {} failed before passing its model", i - 1))
                        })?)
                    } else {
                        None
                    };
                    let tx = if pass_on && i + 1 < count {
                        senders[i + 1].lock().unwrap().take()
                    } else {
                        None
                    };
                    work(i, inbound, tx)
                })();
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every chunk is claimed"))
        .collect()
}

fn sprm_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

pub fn compress(raw: &[u8], cfg: &CompressConfig) -> Result<Vec<u8>> {
    Ok(compress_with_report(raw, cfg)?.0)
}

pub fn compress_with_report(raw: &[u8], cfg: &CompressConfig) -> Result<(Vec<u8>, RunReport)> {
    cfg.validate()?;
    let (stream, exceptions) = canonicalize(raw);
    let seq = encode(&stream, cfg.params, cfg.workers);
    let n = seq.tokens.len();

    let mut flags = select_models(raw.len() as u64, cfg.selector_threshold);
    if flags.spum && cfg.spum.is_none() {
        flags = SelectorFlags::DM_ONLY;
    }
    if flags.sprm && n < cfg.t + 1 {
        flags = SelectorFlags::DM_ONLY;
    }
    let dm_seed = cfg.seed;
    let sprm_seed = sprm_seed(cfg.seed);
    let sprm = if flags.sprm {
        let tc = TrainConfig {
            bs: cfg.bs,
            epochs: 1,
            max_batches: None,
            scale: cfg.scale,
            ..TrainConfig::new(cfg.params, cfg.t)
        };
        Some(Arc::new(pretrain_sprm(&seq, cfg.spum.as_deref(), &tc, sprm_seed)?.model))
    } else {
        None
    };

    let plan = plan_chunks(n, cfg.workers, cfg.bs, cfg.t, cfg.smp_fraction);
    let smp = cfg.smp_units();
    let session = Session {
        bundle: ModelBundle {
            spum: if flags.spum { cfg.spum.clone() } else { None },
            sprm,
            dm_arch: DynamicArch::new(cfg.params.vocab(), cfg.t, cfg.scale),
            dm_seed,
            params: cfg.params,
            t: cfg.t,
        },
        flags,
        bs: plan.bs,
        t: cfg.t,
        smp,
        pass_on: smp > 0 && plan.ranges.len() > 1,
    };
    let outputs = run_chain(plan.ranges.len(), cfg.workers, session.pass_on, |i, inbound, tx| {
        let (start, len) = plan.ranges[i];
        session.encode_inner(&seq.tokens[start..start + len], start, inbound, tx)
    })?;

    let (chunks, reports): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    let bundle = &session.bundle;
    let container = Container {
        header: Header {
            flags,
            params: cfg.params,
            t: cfg.t as u16,
            bs: plan.bs as u32,
            smp,
            dm_seed,
            sprm_seed,
            spum_hash: bundle.spum_hash().unwrap_or(0),
            original_len: raw.len() as u64,
            scale: cfg.scale,
        },
        chunks,
        sprm: bundle.sprm.as_ref().map(|m| m.to_bytes()),
        exceptions,
        residual: seq.residual,
    };
    let (spum_calls, sprm_calls) = session.forward_calls();
    let report = RunReport {
        flags: Some(flags),
        token_count: n,
        chunks: reports,
        spum_forward_calls: spum_calls,
        sprm_forward_calls: sprm_calls,
    };
    Ok((container.write(), report))
}

pub fn decompress(bytes: &[u8], spum: Option<Arc<StaticModelFile>>, threads: usize) -> Result<Vec<u8>> {
    Ok(decompress_with_report(bytes, spum, threads)?.0)
}

pub fn decompress_with_report(
    bytes: &[u8],
    spum: Option<Arc<StaticModelFile>>,
    threads: usize,
) -> Result<(Vec<u8>, RunReport)> {
    let c = Container::read(bytes)?;
    let session = Session::from_container(&c, spum)?;
    let outputs = run_chain(c.chunks.len(), threads, session.pass_on, |i, inbound, tx| {
        session.decode_inner(&c.chunks[i], inbound, tx)
    })?;

    let mut tokens = Vec::new();
    let mut reports = Vec::with_capacity(outputs.len());
    for (buf, r) in outputs {
        tokens.extend(buf);
        reports.push(r);
    }
    let n = tokens.len();
    let h = &c.header;
    let seq = TokenSequence {
        tokens,
        residual: c.residual.clone(),
        params: h.params,
    };
    let stream: NucleotideStream = decode(&seq)?;
    let out = restore(&stream, &c.exceptions, h.original_len)
        .map_err(|e| Error::CorruptStream(e.to_string()))?;
    let (spum_calls, sprm_calls) = session.forward_calls();
    let report = RunReport {
        flags: Some(h.flags),
        token_count: n,
        chunks: reports,
        spum_forward_calls: spum_calls,
        sprm_forward_calls: sprm_calls,
    };
    Ok((out, report))
}
