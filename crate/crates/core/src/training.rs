//! Offline training of the static models.
//!
//! Both trainers walk the token stream front to back in fixed-size batches of
//! sliding contexts, so the result depends only on the data and the seed.

use crate::alphabet::canonicalize;
use crate::error::{Error, Result};
use crate::mixer::cross_entropy;
use crate::models::{derive_sprm_init, ModelScale, StaticArch, StaticKind, StaticModel, StaticModelFile};
use crate::neural::{softmax_rows, Adam, AdamConfig, Rng};
use crate::skmer::{encode, SkParams, TokenSequence};

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub params: SkParams,
    pub t: usize,
    pub bs: usize,
    pub epochs: usize,
    /// Upper bound on batches per epoch; `None` covers every context.
    pub max_batches: Option<usize>,
    pub scale: ModelScale,
}

impl TrainConfig {
    pub fn new(params: SkParams, t: usize) -> Self {
        Self {
            params,
            t,
            bs: 320,
            epochs: 2,
            max_batches: None,
            scale: ModelScale::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: StaticModelFile,
    /// Mean per-token loss (nats) of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Contexts `tokens[p-t..p]` and targets `tokens[p]` for `p` in `positions`.
fn gather(tokens: &[u32], t: usize, positions: std::ops::Range<usize>) -> (Vec<u32>, Vec<u32>) {
    let mut ctx = Vec::with_capacity(positions.len() * t);
    let mut tgt = Vec::with_capacity(positions.len());
    for p in positions {
        ctx.extend_from_slice(&tokens[p - t..p]);
        tgt.push(tokens[p]);
    }
    (ctx, tgt)
}

/// One optimizer step on a batch; returns the summed loss in nats.
pub fn train_step(
    model: &mut StaticModel<f32>,
    opt: &mut Adam<f32>,
    contexts: &[u32],
    targets: &[u32],
) -> Result<f64> {
    let batch = targets.len();
    let (logits, tape) = model.forward(contexts, batch)?;
    let probs = softmax_rows(&logits, model.arch.vocab);
    let (loss, dz) = cross_entropy(&probs, targets, model.arch.vocab)?;
    let grads = model.backward(&tape, &dz)?;
    opt.step(&mut model.store, &grads)?;
    Ok(loss)
}

/// Runs `epochs` sequential passes over all contexts of `tokens`.
fn fit(
    model: &mut StaticModel<f32>,
    tokens: &[u32],
    t: usize,
    bs: usize,
    epochs: usize,
    max_batches: Option<usize>,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(&model.store, AdamConfig::default());
    let bs = bs.max(1);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sum = 0f64;
        let mut count = 0usize;
        let mut start = t;
        let mut batches = 0usize;
        while start < tokens.len() && max_batches.is_none_or(|m| batches < m) {
            let end = (start + bs).min(tokens.len());
            let (ctx, tgt) = gather(tokens, t, start..end);
            sum += train_step(model, &mut opt, &ctx, &tgt)?;
            count += tgt.len();
            start = end;
            batches += 1;
        }
        losses.push(sum / count.max(1) as f64);
    }
    Ok(losses)
}

/// Trains the public model on the concatenated tokenization of `corpus`.
/// Non-ACGT bytes are dropped before tokenizing.
pub fn pretrain_spum(corpus: &[Vec<u8>], cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    let mut tokens = Vec::new();
    for doc in corpus {
        let (stream, _) = canonicalize(doc);
        tokens.extend(encode(&stream, cfg.params, 1).tokens);
    }
    if tokens.len() <= cfg.t {
        return Err(Error::CorpusEmpty);
    }
    let arch = StaticArch::public(cfg.params.vocab(), cfg.t, cfg.scale);
    let mut model = StaticModel::new(arch, seed);
    let epoch_loss = fit(&mut model, &tokens, cfg.t, cfg.bs, cfg.epochs, cfg.max_batches)?;
    Ok(Trained {
        model: StaticModelFile {
            kind: StaticKind::Public,
            params: cfg.params,
            seed,
            model,
        },
        epoch_loss,
    })
}

/// One pass over the target's own contexts. Starts from the public model's
/// lower layers when one is given.
pub fn pretrain_sprm(
    target: &TokenSequence,
    spum: Option<&StaticModelFile>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    let n = target.tokens.len();
    if n < cfg.t + 1 {
        return Err(Error::TargetTooShort {
            needed: cfg.t + 1,
            got: n,
        });
    }
    let mut model = match spum {
        Some(s) => {
            s.check_compatible(target.params, cfg.t)?;
            derive_sprm_init(&s.model, seed)
        }
        None => StaticModel::new(
            StaticArch::private(target.params.vocab(), cfg.t, cfg.scale),
            seed,
        ),
    };
    let epoch_loss = fit(&mut model, &target.tokens, cfg.t, cfg.bs, 1, cfg.max_batches)?;
    Ok(Trained {
        model: StaticModelFile {
            kind: StaticKind::Private,
            params: target.params,
            seed,
            model,
        },
        epoch_loss,
    })
}

/// Deterministic synthetic FASTA records for the pre-training sample corpus.
///
/// Each record mixes order-3 Markov sequence with copies (some reverse
/// complemented) of earlier stretches, which is roughly the kind of structure
/// real genomes have.
pub fn synthetic_corpus(seed: u64, records: usize, record_len: usize) -> Vec<Vec<u8>> {
    let mut rng = Rng::new(seed);
    // one transition table shared by all records
    let mut table = [[0f64; 4]; 64];
    for row in table.iter_mut() {
        let w: Vec<f64> = (0..4).map(|_| rng.next_f64().powi(3) + 0.02).collect();
        let s: f64 = w.iter().sum();
        let mut acc = 0.0;
        for (c, wi) in row.iter_mut().zip(&w) {
            acc += wi / s;
            *c = acc;
        }
    }
    (0..records)
        .map(|r| {
            let mut seq: Vec<u8> = Vec::with_capacity(record_len);
            let mut state = 0usize;
            while seq.len() < record_len {
                if seq.len() > 200 && rng.below(100) < 3 {
                    let len = 20 + rng.below(180) as usize;
                    let from = rng.below((seq.len() - len.min(seq.len())) as u64 + 1) as usize;
                    let rc = rng.below(2) == 0;
                    let piece: Vec<u8> = if rc {
                        seq[from..(from + len).min(seq.len())]
                            .iter()
                            .rev()
                            .map(|&b| 3 - b)
                            .collect()
                    } else {
                        seq[from..(from + len).min(seq.len())].to_vec()
                    };
                    for b in piece {
                        if seq.len() == record_len {
                            break;
                        }
                        seq.push(b);
                        state = (state * 4 + b as usize) % 64;
                    }
                    continue;
                }
                let u = rng.next_f64();
                let b = table[state].iter().position(|&c| u < c).unwrap_or(3) as u8;
                seq.push(b);
                state = (state * 4 + b as usize) % 64;
            }
            let mut out = format!(">synthetic_{r}\n").into_bytes();
            for line in seq.chunks(60) {
                out.extend(line.iter().map(|&b| b"ACGT"[b as usize]));
                out.push(b'\n');
            }
            out
        })
        .collect()
}
