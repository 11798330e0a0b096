//! Python bindings. Heavy calls release the GIL.

use std::path::PathBuf;
use std::sync::Arc;

use nuczip::alphabet::canonicalize;
use nuczip::container::Container;
use nuczip::mixer::{select_models as select, DEFAULT_THRESHOLD_BYTES};
use nuczip::models::{ModelScale, StaticModelFile};
use nuczip::pipeline::{self, CompressConfig, DEFAULT_BS, DEFAULT_SEED, DEFAULT_SMP_FRACTION, DEFAULT_T};
use nuczip::skmer::{encode, SkParams};
use nuczip::training::{self, TrainConfig};
use nuczip::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(nuczip_py, NuczipError, PyException);
create_exception!(nuczip_py, SpumMissingError, NuczipError);
create_exception!(nuczip_py, ChecksumMismatchError, NuczipError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidParams(_) | Error::ConfigInvalid(_) | Error::CorpusEmpty | Error::TargetTooShort { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::SpumMissing => SpumMissingError::new_err(e.to_string()),
        Error::ChecksumMismatch(_) => ChecksumMismatchError::new_err(e.to_string()),
        _ => NuczipError::new_err(e.to_string()),
    }
}

/// A pre-trained static model (public or private).
#[pyclass(name = "StaticModel", frozen)]
struct PyStaticModel {
    inner: Arc<StaticModelFile>,
}

#[pymethods]
impl PyStaticModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = StaticModelFile::load(&path).map_err(to_py)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let inner = StaticModelFile::from_bytes(data).map_err(to_py)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn hash(&self) -> u64 {
        self.inner.hash()
    }

    #[getter]
    fn s(&self) -> usize {
        self.inner.params.s()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.params.k()
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.model.arch.t
    }

    fn __repr__(&self) -> String {
        format!(
            "StaticModel(s={}, k={}, t={}, hash={:016x})",
            self.s(),
            self.k(),
            self.t(),
            self.hash()
        )
    }
}

fn params(s: u8, k: u8) -> PyResult<SkParams> {
    SkParams::new(s, k).map_err(to_py)
}

fn scale(factor: u8) -> PyResult<ModelScale> {
    ModelScale::new(factor).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (
    data, *, s=3, k=3, t=DEFAULT_T, bs=DEFAULT_BS, workers=1, smp_fraction=DEFAULT_SMP_FRACTION,
    selector_threshold=DEFAULT_THRESHOLD_BYTES, seed=DEFAULT_SEED, scale_factor=4, spum=None
))]
#[allow(clippy::too_many_arguments)]
fn compress<'py>(
    py: Python<'py>,
    data: Vec<u8>,
    s: u8,
    k: u8,
    t: usize,
    bs: usize,
    workers: usize,
    smp_fraction: f64,
    selector_threshold: u64,
    seed: u64,
    scale_factor: u8,
    spum: Option<&PyStaticModel>,
) -> PyResult<Bound<'py, PyBytes>> {
    let cfg = CompressConfig {
        params: params(s, k)?,
        t,
        bs,
        workers,
        smp_fraction,
        selector_threshold,
        seed,
        scale: scale(scale_factor)?,
        spum: spum.map(|m| m.inner.clone()),
    };
    let out = py.detach(|| pipeline::compress(&data, &cfg)).map_err(to_py)?;
    Ok(PyBytes::new(py, &out))
}

#[pyfunction]
#[pyo3(signature = (data, *, spum=None, threads=1))]
fn decompress<'py>(
    py: Python<'py>,
    data: Vec<u8>,
    spum: Option<&PyStaticModel>,
    threads: usize,
) -> PyResult<Bound<'py, PyBytes>> {
    let spum = spum.map(|m| m.inner.clone());
    let out = py
        .detach(|| pipeline::decompress(&data, spum, threads.max(1)))
        .map_err(to_py)?;
    Ok(PyBytes::new(py, &out))
}

/// Header fields of a compressed container.
#[pyfunction]
fn inspect<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let c = Container::read(data).map_err(to_py)?;
    let h = &c.header;
    let d = PyDict::new(py);
    d.set_item("s", h.params.s())?;
    d.set_item("k", h.params.k())?;
    d.set_item("t", h.t)?;
    d.set_item("bs", h.bs)?;
    d.set_item("smp", h.smp)?;
    d.set_item("flags", (h.flags.spum, h.flags.sprm, h.flags.dm))?;
    d.set_item("spum_hash", h.spum_hash)?;
    d.set_item("original_len", h.original_len)?;
    d.set_item("scale_factor", h.scale.factor())?;
    d.set_item("chunks", c.chunks.len())?;
    d.set_item("exceptions", c.exceptions.entries.len())?;
    Ok(d)
}

/// (s,k)-mer tokens of the bases in `data`; other bytes are skipped.
#[pyfunction]
#[pyo3(signature = (data, *, s=3, k=3))]
fn tokenize(data: &[u8], s: u8, k: u8) -> PyResult<Vec<u32>> {
    let (stream, _) = canonicalize(data);
    Ok(encode(&stream, params(s, k)?, 1).tokens)
}

/// Flags `(spum, sprm, dm)` chosen for an input of `size` bytes.
#[pyfunction]
#[pyo3(signature = (size, threshold=DEFAULT_THRESHOLD_BYTES))]
fn select_models(size: u64, threshold: u64) -> (bool, bool, bool) {
    let f = select(size, threshold);
    (f.spum, f.sprm, f.dm)
}

#[pyfunction]
#[pyo3(signature = (
    corpus, *, s=3, k=3, t=DEFAULT_T, bs=DEFAULT_BS, epochs=2, max_batches=None, scale_factor=4, seed=DEFAULT_SEED
))]
#[allow(clippy::too_many_arguments)]
fn pretrain_spum(
    py: Python<'_>,
    corpus: Vec<Vec<u8>>,
    s: u8,
    k: u8,
    t: usize,
    bs: usize,
    epochs: usize,
    max_batches: Option<usize>,
    scale_factor: u8,
    seed: u64,
) -> PyResult<PyStaticModel> {
    let cfg = TrainConfig {
        params: params(s, k)?,
        t,
        bs,
        epochs,
        max_batches,
        scale: scale(scale_factor)?,
    };
    let trained = py
        .detach(|| training::pretrain_spum(&corpus, &cfg, seed))
        .map_err(to_py)?;
    Ok(PyStaticModel {
        inner: Arc::new(trained.model),
    })
}

/// FASTA records of generated sequence with repeats and reverse complements.
#[pyfunction]
fn synthetic_corpus(seed: u64, records: usize, record_len: usize) -> Vec<Vec<u8>> {
    training::synthetic_corpus(seed, records, record_len)
}

/// Output bits per input byte.
#[pyfunction]
fn compression_ratio(compressed: u64, source: u64) -> PyResult<f64> {
    nuczip::bench::compression_ratio(compressed, source).map_err(to_py)
}

#[pyfunction]
fn throughput(source: u64, ct: f64, dt: f64) -> PyResult<f64> {
    nuczip::bench::throughput(source, ct, dt).map_err(to_py)
}

/// Coefficient of variation of a list of ratios, in percent.
#[pyfunction]
fn robustness(crs: Vec<f64>) -> PyResult<f64> {
    nuczip::bench::robustness(&crs).map_err(to_py)
}

#[pymodule]
fn nuczip_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStaticModel>()?;
    m.add("NuczipError", m.py().get_type::<NuczipError>())?;
    m.add("SpumMissingError", m.py().get_type::<SpumMissingError>())?;
    m.add("ChecksumMismatchError", m.py().get_type::<ChecksumMismatchError>())?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(decompress, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(select_models, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_spum, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(compression_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(throughput, m)?)?;
    m.add_function(wrap_pyfunction!(robustness, m)?)?;
    Ok(())
}
