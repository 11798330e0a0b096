#![allow(dead_code)]

use std::sync::Arc;

use nuczip::models::{ModelScale, StaticModelFile};
use nuczip::neural::Rng;
use nuczip::pipeline::CompressConfig;
use nuczip::skmer::SkParams;
use nuczip::training::{pretrain_spum, synthetic_corpus, TrainConfig};

pub fn random_acgt(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| b"ACGT"[rng.below(4) as usize]).collect()
}

pub fn random_bytes(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| rng.below(256) as u8).collect()
}

/// Bases repeating with the given period.
pub fn periodic_acgt(seed: u64, period: usize, len: usize) -> Vec<u8> {
    let unit = random_acgt(seed, period);
    unit.iter().copied().cycle().take(len).collect()
}

/// Small models and short substreams so tests stay quick.
pub fn small_cfg(params: SkParams, workers: usize) -> CompressConfig {
    CompressConfig {
        params,
        t: 8,
        bs: 16,
        workers,
        scale: ModelScale::new(16).unwrap(),
        ..CompressConfig::default()
    }
}

/// A barely trained public model; enough to exercise the public-model branch.
pub fn tiny_spum(params: SkParams, t: usize, scale: ModelScale, seed: u64) -> Arc<StaticModelFile> {
    let corpus = synthetic_corpus(seed, 2, 4000);
    let cfg = TrainConfig {
        bs: 16,
        epochs: 1,
        max_batches: Some(4),
        scale,
        ..TrainConfig::new(params, t)
    };
    Arc::new(pretrain_spum(&corpus, &cfg, seed).unwrap().model)
}
