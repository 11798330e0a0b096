use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nuczip::bench::{run_benchmark, BenchConfig};
use nuczip::mixer::DEFAULT_THRESHOLD_BYTES;
use nuczip::models::{ModelScale, StaticModelFile};
use nuczip::pipeline::{compress, decompress, CompressConfig};
use nuczip::skmer::SkParams;
use nuczip::training::{pretrain_spum, synthetic_corpus, TrainConfig};

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const IO: i32 = 2;
    pub const FORMAT: i32 = 3;
    pub const VERIFY: i32 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "nuczip", version, about = "Learning-based lossless compressor for nucleotide sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a file
    Compress(CompressArgs),
    /// Restore a compressed file
    Decompress(DecompressArgs),
    /// Compress, decompress and compare in a temporary directory
    Verify(VerifyArgs),
    /// Pre-train the static public model on a corpus
    PretrainSpum(PretrainArgs),
    /// Round-trip datasets and write a CSV of metrics
    Bench(BenchArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CodingArgs {
    /// Token stride in bases
    #[arg(long, default_value_t = 3)]
    pub s: u8,
    /// Token length in bases
    #[arg(long, default_value_t = 3)]
    pub k: u8,
    /// Context length in tokens
    #[arg(long, default_value_t = 32)]
    pub t: usize,
    /// Substreams coded per model step
    #[arg(long, default_value_t = 320)]
    pub bs: usize,
    /// Chunks and worker threads; more than one enables model passing between chunks
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Static public model file
    #[arg(long)]
    pub spum: Option<PathBuf>,
    /// Inputs up to this many bytes use the public model, larger ones a private model
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_BYTES)]
    pub selector_threshold: u64,
    /// Fraction of a chunk after which its model is passed to the next worker (0 disables)
    #[arg(long, default_value_t = 0.05)]
    pub smp_fraction: f64,
    /// Seed for model initialization
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Divide every model width by this power of two (1 = full size)
    #[arg(long, default_value_t = 4)]
    pub scale_factor: u8,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Input file
    #[arg(short, long)]
    pub input: PathBuf,
    /// Output file
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub coding: CodingArgs,
    /// Print a JSON summary
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    /// Input file
    #[arg(short, long)]
    pub input: PathBuf,
    /// Output file
    #[arg(short, long)]
    pub output: PathBuf,
    /// Static public model file, required when the container used one
    #[arg(long)]
    pub spum: Option<PathBuf>,
    /// Worker threads (does not affect the output)
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Print a JSON summary
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Input file
    #[arg(short, long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub coding: CodingArgs,
    /// Print a JSON summary
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus files (any bytes; non-ACGT bytes are skipped)
    #[arg(short, long = "input", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Model file to write
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub s: u8,
    #[arg(long, default_value_t = 3)]
    pub k: u8,
    #[arg(long, default_value_t = 32)]
    pub t: usize,
    #[arg(long, default_value_t = 320)]
    pub bs: usize,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    /// Stop each epoch after this many batches
    #[arg(long)]
    pub max_batches: Option<usize>,
    /// Add this many generated records of 10 kb to the corpus
    #[arg(long, default_value_t = 0)]
    pub synthetic_records: usize,
    /// Seed for model initialization
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub scale_factor: u8,
    /// Print a JSON summary
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Dataset files
    pub datasets: Vec<PathBuf>,
    /// CSV report path
    #[arg(long, default_value = "bench.csv")]
    pub csv: PathBuf,
    #[command(flatten)]
    pub coding: CodingArgs,
    /// Print a JSON summary
    #[arg(long)]
    pub json: bool,
}

/// Marks an error as a usage problem (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Marks a failed round-trip comparison (exit code 4).
#[derive(Debug)]
pub struct Mismatch;

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("round trip did not reproduce the input")
    }
}

impl std::error::Error for Mismatch {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    use nuczip::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return exit::USAGE;
        }
        if cause.is::<Mismatch>() {
            return exit::VERIFY;
        }
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) => exit::IO,
                E::InvalidParams(_) | E::ConfigInvalid(_) | E::CorpusEmpty | E::TargetTooShort { .. } => {
                    exit::USAGE
                }
                E::VerificationFailed(_) => exit::VERIFY,
                _ => exit::FORMAT,
            };
        }
    }
    exit::FORMAT
}

fn load_spum(path: Option<&Path>) -> Result<Option<Arc<StaticModelFile>>> {
    path.map(|p| {
        let bytes = std::fs::read(p).with_context(|| format!("reading public model {}", p.display()))?;
        Ok(Arc::new(StaticModelFile::from_bytes(&bytes)?))
    })
    .transpose()
}

impl CodingArgs {
    /// Checks every flag before any file is touched.
    pub fn to_config(&self) -> Result<CompressConfig> {
        let params = SkParams::new(self.s, self.k).map_err(|e| Usage(e.to_string()))?;
        let scale = ModelScale::new(self.scale_factor).map_err(|e| Usage(e.to_string()))?;
        let cfg = CompressConfig {
            params,
            t: self.t,
            bs: self.bs,
            workers: self.workers,
            smp_fraction: self.smp_fraction,
            selector_threshold: self.selector_threshold,
            seed: self.seed,
            scale,
            spum: None,
        };
        cfg.validate().map_err(|e| Usage(e.to_string()))?;
        let spum = load_spum(self.spum.as_deref())?;
        let cfg = CompressConfig { spum, ..cfg };
        cfg.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Writes through a temporary file in the destination directory so a failed
/// run never leaves a partial output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn cr(compressed: usize, source: usize) -> f64 {
    nuczip::bench::compression_ratio(compressed as u64, source as u64).unwrap_or(0.0)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compress(a) => {
            let cfg = a.coding.to_config()?;
            let raw = read_input(&a.input)?;
            let t0 = Instant::now();
            let packed = compress(&raw, &cfg)?;
            let elapsed = t0.elapsed().as_secs_f64();
            write_atomic(&a.output, &packed)?;
            if a.json {
                println!(
                    "{}",
                    json!({
                        "source_bytes": raw.len(),
                        "compressed_bytes": packed.len(),
                        "cr_bits_per_base": cr(packed.len(), raw.len()),
                        "elapsed_s": elapsed,
                    })
                );
            } else {
                println!("source size:     {} bytes", raw.len());
                println!("compressed size: {} bytes", packed.len());
                println!("CR:              {:.4} bits/base", cr(packed.len(), raw.len()));
                println!("elapsed:         {elapsed:.2} s");
            }
        }
        Command::Decompress(a) => {
            if a.workers == 0 {
                bail!(Usage("at least one worker is required".into()));
            }
            let spum = load_spum(a.spum.as_deref())?;
            let packed = read_input(&a.input)?;
            let t0 = Instant::now();
            let raw = decompress(&packed, spum, a.workers)?;
            let elapsed = t0.elapsed().as_secs_f64();
            write_atomic(&a.output, &raw)?;
            if a.json {
                println!("{}", json!({ "output_bytes": raw.len(), "elapsed_s": elapsed }));
            } else {
                println!("restored {} bytes in {elapsed:.2} s", raw.len());
            }
        }
        Command::Verify(a) => {
            let cfg = a.coding.to_config()?;
            let raw = read_input(&a.input)?;
            let dir = tempfile::tempdir()?;
            let packed_path = dir.path().join("packed.pmkl");
            let t0 = Instant::now();
            std::fs::write(&packed_path, compress(&raw, &cfg)?)?;
            let ct = t0.elapsed().as_secs_f64();
            let packed = std::fs::read(&packed_path)?;
            let t1 = Instant::now();
            let restored = decompress(&packed, cfg.spum.clone(), cfg.workers)?;
            let dt = t1.elapsed().as_secs_f64();
            let ok = restored == raw;
            if a.json {
                println!(
                    "{}",
                    json!({
                        "identical": ok,
                        "source_bytes": raw.len(),
                        "compressed_bytes": packed.len(),
                        "cr_bits_per_base": cr(packed.len(), raw.len()),
                        "ct_s": ct,
                        "dt_s": dt,
                    })
                );
            } else {
                println!(
                    "{}: {} -> {} bytes ({:.4} bits/base)",
                    if ok { "identical" } else { "MISMATCH" },
                    raw.len(),
                    packed.len(),
                    cr(packed.len(), raw.len())
                );
            }
            if !ok {
                bail!(Mismatch);
            }
        }
        Command::PretrainSpum(a) => {
            let params = SkParams::new(a.s, a.k).map_err(|e| Usage(e.to_string()))?;
            let scale = ModelScale::new(a.scale_factor).map_err(|e| Usage(e.to_string()))?;
            if a.t == 0 || a.bs == 0 {
                bail!(Usage("t and bs must be positive".into()));
            }
            let mut corpus = Vec::with_capacity(a.inputs.len());
            for p in &a.inputs {
                corpus.push(read_input(p)?);
            }
            corpus.extend(synthetic_corpus(a.seed, a.synthetic_records, 10_000));
            let cfg = TrainConfig {
                params,
                t: a.t,
                bs: a.bs,
                epochs: a.epochs,
                max_batches: a.max_batches,
                scale,
            };
            let trained = pretrain_spum(&corpus, &cfg, a.seed)?;
            write_atomic(&a.output, &trained.model.to_bytes())?;
            let hash = format!("{:016x}", trained.model.hash());
            if a.json {
                println!("{}", json!({ "hash": hash, "epoch_loss": trained.epoch_loss }));
            } else {
                println!("model hash {hash}");
                for (i, l) in trained.epoch_loss.iter().enumerate() {
                    println!("epoch {}: mean loss {l:.4} nats/token", i + 1);
                }
            }
        }
        Command::Bench(a) => {
            let compress = a.coding.to_config()?;
            let cfg = BenchConfig {
                threads: compress.workers,
                compress,
                csv: Some(a.csv.clone()),
                fault: None,
            };
            let report = run_benchmark(&a.datasets, &cfg)?;
            if a.json {
                let rows: Vec<_> = report
                    .rows
                    .iter()
                    .map(|r| {
                        json!({
                            "dataset": r.dataset,
                            "source_bytes": r.source_bytes,
                            "compressed_bytes": r.compressed_bytes,
                            "ct_s": r.ct_s,
                            "dt_s": r.dt_s,
                            "cr_bits_per_base": r.cr,
                            "thp_bytes_per_s": r.thp,
                            "verified": r.verified(),
                        })
                    })
                    .collect();
                println!(
                    "{}",
                    json!({
                        "rows": rows,
                        "mean_cr": report.mean_cr,
                        "crp_percent": report.crp,
                        "peak_mem_bytes": report.peak_mem_bytes,
                    })
                );
            } else {
                for r in &report.rows {
                    println!(
                        "{}: {:.4} bits/base, {:.1} B/s{}",
                        r.dataset,
                        r.cr,
                        r.thp,
                        if r.verified() { "" } else { "  VERIFICATION FAILED" }
                    );
                }
                println!("report written to {}", a.csv.display());
            }
            if report.rows.iter().any(|r| !r.verified()) {
                bail!(Mismatch);
            }
        }
    }
    Ok(())
}
