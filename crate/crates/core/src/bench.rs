//! Compression metrics and a small benchmark harness.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::pipeline::{compress, decompress, CompressConfig};

/// Bits of output per byte of input.
pub fn compression_ratio(compressed: u64, source: u64) -> Result<f64> {
    if source == 0 {
        return Err(Error::EmptySource);
    }
    Ok(compressed as f64 / source as f64 * 8.0)
}

/// Source bytes per second of combined compression and decompression time.
pub fn throughput(source: u64, ct: f64, dt: f64) -> Result<f64> {
    let total = ct + dt;
    if total <= 0.0 {
        return Err(Error::ZeroTime);
    }
    Ok(source as f64 / total)
}

fn coefficient_of_variation(crs: &[f64], dof: usize) -> Result<f64> {
    if crs.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = crs.len() as f64;
    let mean = crs.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::InvalidParams("mean compression ratio must be positive".into()));
    }
    if crs.len() <= dof {
        return Ok(0.0);
    }
    let ss = crs.iter().map(|c| (c - mean).powi(2)).sum::<f64>();
    Ok(100.0 * (ss / (crs.len() - dof) as f64).sqrt() / mean)
}

/// Coefficient of variation of `crs` in percent, with the sample (N − 1)
/// standard deviation. This is the form that reproduces published robustness
/// figures such as 4.455% for the CRs {1.812, 1.943, 1.900, 1.850, 1.851,
/// 1.651, 1.892, 1.866, 1.844}; the 1/N form gives 4.200% there.
pub fn robustness(crs: &[f64]) -> Result<f64> {
    coefficient_of_variation(crs, 1)
}

/// Same with the population (1/N) standard deviation.
pub fn robustness_population(crs: &[f64]) -> Result<f64> {
    coefficient_of_variation(crs, 0)
}

fn current_rss() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Samples the resident set size every 100 ms on a background thread.
pub struct MemorySampler {
    peak: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MemorySampler {
    pub const INTERVAL: Duration = Duration::from_millis(100);

    pub fn start() -> Self {
        let peak = Arc::new(AtomicU64::new(current_rss().unwrap_or(0)));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let (peak, stop) = (peak.clone(), stop.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    if let Some(rss) = current_rss() {
                        peak.fetch_max(rss, Ordering::Relaxed);
                    }
                    std::thread::sleep(Self::INTERVAL);
                }
            })
        };
        Self {
            peak,
            stop,
            handle: Some(handle),
        }
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::Relaxed)
    }

    /// Stops sampling and returns the peak in bytes (0 where /proc is unavailable).
    pub fn finish(mut self) -> u64 {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        if let Some(rss) = current_rss() {
            self.peak.fetch_max(rss, Ordering::Relaxed);
        }
        self.peak()
    }
}

impl Drop for MemorySampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub dataset: String,
    pub source_bytes: u64,
    pub compressed_bytes: u64,
    pub ct_s: f64,
    pub dt_s: f64,
    pub cr: f64,
    pub thp: f64,
    /// `None` when the round trip reproduced the input, otherwise the reason.
    pub failure: Option<String>,
}

impl DatasetRow {
    pub fn verified(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<DatasetRow>,
    pub mean_cr: Option<f64>,
    pub crp: Option<f64>,
    pub peak_mem_bytes: u64,
}

pub const CSV_HEADER: [&str; 8] = [
    "dataset",
    "source_bytes",
    "compressed_bytes",
    "ct_s",
    "dt_s",
    "cr_bits_per_base",
    "thp_bytes_per_s",
    "verified",
];

impl MetricsReport {
    /// One row per dataset, then the aggregate row when any dataset verified.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(CSV_HEADER).map_err(io)?;
        for r in &self.rows {
            let verified = match &r.failure {
                None => "true".to_string(),
                Some(_) => "VerificationFailed".to_string(),
            };
            w.write_record([
                r.dataset.clone(),
                r.source_bytes.to_string(),
                r.compressed_bytes.to_string(),
                format!("{:.6}", r.ct_s),
                format!("{:.6}", r.dt_s),
                format!("{:.6}", r.cr),
                format!("{:.3}", r.thp),
                verified,
            ])
            .map_err(io)?;
        }
        if let (Some(mean), Some(crp)) = (self.mean_cr, self.crp) {
            w.write_record([
                "AGGREGATE".to_string(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                format!("{mean:.6}"),
                format!("{crp:.6}"),
                self.peak_mem_bytes.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Hook applied to decompressed bytes before comparison; used to exercise the
/// failure path.
pub type FaultHook = fn(&mut Vec<u8>);

#[derive(Debug, Clone, Default)]
pub struct BenchConfig {
    pub compress: CompressConfig,
    /// Decompression threads.
    pub threads: usize,
    pub csv: Option<PathBuf>,
    pub fault: Option<FaultHook>,
}

fn bench_one(path: &Path, cfg: &BenchConfig) -> Result<DatasetRow> {
    let raw = std::fs::read(path)?;
    let t0 = Instant::now();
    let packed = compress(&raw, &cfg.compress)?;
    let ct = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let restored = decompress(&packed, cfg.compress.spum.clone(), cfg.threads.max(1));
    let dt = t1.elapsed().as_secs_f64();
    let failure = match restored {
        Ok(mut out) => {
            if let Some(f) = cfg.fault {
                f(&mut out);
            }
            (out != raw).then(|| "decompressed bytes differ from the input".to_string())
        }
        Err(e) => Some(e.to_string()),
    };
    Ok(DatasetRow {
        dataset: path.display().to_string(),
        source_bytes: raw.len() as u64,
        compressed_bytes: packed.len() as u64,
        ct_s: ct,
        dt_s: dt,
        cr: compression_ratio(packed.len() as u64, raw.len() as u64).unwrap_or(0.0),
        thp: throughput(raw.len() as u64, ct, dt).unwrap_or(0.0),
        failure,
    })
}

/// Compresses, decompresses and verifies every dataset in turn.
pub fn run_benchmark(datasets: &[PathBuf], cfg: &BenchConfig) -> Result<MetricsReport> {
    let sampler = MemorySampler::start();
    let mut rows = Vec::with_capacity(datasets.len());
    for path in datasets {
        rows.push(bench_one(path, cfg)?);
    }
    let peak = sampler.finish();
    let crs: Vec<f64> = rows
        .iter()
        .filter(|r| r.verified() && r.source_bytes > 0)
        .map(|r| r.cr)
        .collect();
    let (mean_cr, crp) = if crs.is_empty() {
        (None, None)
    } else {
        (
            Some(crs.iter().sum::<f64>() / crs.len() as f64),
            Some(robustness(&crs)?),
        )
    };
    let report = MetricsReport {
        rows,
        mean_cr,
        crp,
        peak_mem_bytes: peak,
    };
    if let Some(p) = &cfg.csv {
        report.write_csv(std::fs::File::create(p)?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(compression_ratio(100, 100).unwrap(), 8.0);
        assert_eq!(compression_ratio(25, 100).unwrap(), 2.0);
        assert_eq!(compression_ratio(1845, 8000).unwrap(), 1.845);
        assert!(matches!(compression_ratio(1, 0), Err(Error::EmptySource)));
    }

    #[test]
    fn throughput_examples() {
        assert_eq!(throughput(1024, 1.0, 1.0).unwrap(), 512.0);
        assert_eq!(throughput(1000, 2.0, 0.0).unwrap(), 500.0);
        assert!(matches!(throughput(1, 0.0, 0.0), Err(Error::ZeroTime)));
        // 10 MB over 500 s
        let kb_s = throughput(10 * 1024 * 1024, 300.0, 200.0).unwrap() / 1000.0;
        assert!((kb_s - 20.97).abs() < 0.005, "{kb_s}");
    }

    #[test]
    fn robustness_examples() {
        assert_eq!(robustness(&[1.7, 1.7, 1.7]).unwrap(), 0.0);
        assert_eq!(robustness(&[1.7]).unwrap(), 0.0);
        // mean 2, squared deviations 1 + 1
        assert!((robustness_population(&[1.0, 3.0]).unwrap() - 50.0).abs() < 1e-12);
        assert!((robustness(&[1.0, 3.0]).unwrap() - 100.0 * 2f64.sqrt() / 2.0).abs() < 1e-12);
        let row = [1.812, 1.943, 1.900, 1.850, 1.851, 1.651, 1.892, 1.866, 1.844];
        let crp = robustness(&row).unwrap();
        assert!((crp - 4.455).abs() <= 0.01, "{crp}");
        let pop = robustness_population(&row).unwrap();
        assert!((pop - 4.200).abs() <= 0.001, "{pop}");
        assert!(matches!(robustness(&[]), Err(Error::EmptyList)));
    }

    proptest! {
        #[test]
        fn robustness_is_scale_invariant(
            crs in proptest::collection::vec(0.1f64..8.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = crs.iter().map(|x| x * c).collect();
            let a = robustness(&crs).unwrap();
            let b = robustness(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            let a = robustness_population(&crs).unwrap();
            let b = robustness_population(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn ratio_is_linear(src in 1u64..1_000_000, a in 0u64..1_000_000, b in 0u64..1_000_000) {
            let sum = compression_ratio(a + b, src).unwrap();
            let parts = compression_ratio(a, src).unwrap() + compression_ratio(b, src).unwrap();
            prop_assert!((sum - parts).abs() <= 1e-9 * sum.max(1.0));
        }
    }

    #[test]
    fn empty_dataset_list_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("out.csv");
        let cfg = BenchConfig {
            csv: Some(csv.clone()),
            ..Default::default()
        };
        let report = run_benchmark(&[], &cfg).unwrap();
        assert!(report.rows.is_empty());
        let text = std::fs::read_to_string(csv).unwrap();
        assert_eq!(
            text,
            "dataset,source_bytes,compressed_bytes,ct_s,dt_s,cr_bits_per_base,thp_bytes_per_s,verified\n"
        );
    }

    #[allow(clippy::ptr_arg)] // signature fixed by FaultHook
    fn flip_first(out: &mut Vec<u8>) {
        if let Some(b) = out.first_mut() {
            *b ^= 1;
        }
    }

    #[test]
    fn fault_injection_marks_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("a.fa");
        std::fs::write(&data, b">x\nACGTACGTTTGACCA\n").unwrap();
        let csv = dir.path().join("out.csv");
        let mut cfg = BenchConfig {
            compress: CompressConfig {
                t: 2,
                bs: 2,
                scale: crate::models::ModelScale::new(32).unwrap(),
                ..Default::default()
            },
            threads: 1,
            csv: Some(csv.clone()),
            fault: None,
        };
        let good = run_benchmark(std::slice::from_ref(&data), &cfg).unwrap();
        assert!(good.rows[0].verified());
        assert!(good.mean_cr.is_some());
        assert!(std::fs::read_to_string(&csv).unwrap().contains("\nAGGREGATE,-,-,-,-,"));

        cfg.fault = Some(flip_first);
        let bad = run_benchmark(&[data], &cfg).unwrap();
        assert!(!bad.rows[0].verified());
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",VerificationFailed"));
    }

    #[test]
    fn sampler_sees_this_process() {
        let s = MemorySampler::start();
        std::thread::sleep(Duration::from_millis(150));
        let peak = s.finish();
        if Path::new("/proc/self/status").exists() {
            assert!(peak > 0);
        }
    }
}
