//! Python bindings for `drq-core`.
//!
//! Vectors cross the boundary as lists of floats (or anything that behaves
//! like a sequence of floats, such as numpy rows).

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use drq_core::train::{distortion_losses, CodebookInit};
use drq_core::{io, Codebook, EvalOptions, FeatureMatrix, TrainConfig};

fn to_py(e: drq_core::Error) -> PyErr {
    match e {
        drq_core::Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for drq_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn features(rows: Vec<Vec<f64>>, labels: Option<Vec<Vec<i64>>>) -> PyResult<FeatureMatrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("need at least one row"));
    }
    let f = FeatureMatrix::from_rows(&rows).py()?;
    match labels {
        Some(l) => f.with_multi_labels(l).py(),
        None => Ok(f),
    }
}

fn rows_of(data: &[f64], dim: usize) -> Vec<Vec<f64>> {
    data.chunks(dim).map(<[f64]>::to_vec).collect()
}

/// Shared-codebook residual quantizer.
#[pyclass(name = "RqModel", module = "drq", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: drq_core::RqModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (codebook, scale, levels, gamma = 20.0))]
    fn new(codebook: Vec<Vec<f64>>, scale: f64, levels: usize, gamma: f64) -> PyResult<Self> {
        let cb = Codebook::from_rows(&codebook).py()?;
        Ok(Self {
            inner: drq_core::RqModel::new(cb, scale, gamma, levels).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_model(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_model(&path, &self.inner).py()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.levels()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    #[getter]
    fn code_bits(&self) -> usize {
        self.inner.code_bits()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn codebook(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.codebook().as_slice(), self.inner.dim())
    }

    fn with_levels(&self, levels: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_levels(levels).py()?,
        })
    }

    /// Code indices for one vector.
    fn encode(&self, x: Vec<f64>) -> PyResult<Vec<u32>> {
        Ok(drq_core::encode_codes(&x, &self.inner).py()?.into_inner())
    }

    /// Sum of the first `m` selected codewords (all levels by default).
    #[pyo3(signature = (codes, m = None))]
    fn reconstruct(&self, codes: Vec<u32>, m: Option<usize>) -> PyResult<Vec<f64>> {
        let m = m.unwrap_or(codes.len());
        drq_core::reconstruct_hard(&drq_core::CodeSequence::new(codes), &self.inner, m).py()
    }

    /// Batch distortions as a dict.
    fn distortion<'py>(&self, py: Python<'py>, rows: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let r = distortion_losses(&features(rows, None)?, &self.inner).py()?;
        let d = PyDict::new(py);
        d.set_item("e_hard", r.e_hard)?;
        d.set_item("e_soft", r.e_soft)?;
        d.set_item("e_joint", r.e_joint)?;
        d.set_item("per_level_hard", r.per_level_hard)?;
        d.set_item("per_level_soft", r.per_level_soft)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "RqModel(k={}, dim={}, levels={}, scale={:.6}, gamma={})",
            self.inner.k(),
            self.inner.dim(),
            self.inner.levels(),
            self.inner.scale(),
            self.inner.gamma()
        )
    }
}

/// Encoded database supporting asymmetric-distance search.
#[pyclass(name = "Database", module = "drq", frozen)]
struct PyDatabase {
    inner: drq_core::EncodedDatabase,
}

#[pymethods]
impl PyDatabase {
    #[new]
    #[pyo3(signature = (model, rows, labels = None))]
    fn new(model: &PyModel, rows: Vec<Vec<f64>>, labels: Option<Vec<Vec<i64>>>) -> PyResult<Self> {
        let f = features(rows, labels)?;
        Ok(Self {
            inner: drq_core::encode_database(&f, &model.inner).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, model, labels = None))]
    fn load(path: PathBuf, model: &PyModel, labels: Option<Vec<Vec<i64>>>) -> PyResult<Self> {
        let db = io::load_codes(&path, &model.inner).py()?;
        let db = match labels {
            Some(l) => db.with_labels(l).py()?,
            None => db,
        };
        Ok(Self { inner: db })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_codes(&path, &self.inner).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn codes(&self, i: usize) -> PyResult<Vec<u32>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("item {i} out of range")));
        }
        Ok(self.inner.item_codes(i).to_vec())
    }

    /// `[(id, squared distance), ...]` best first.
    #[pyo3(signature = (query, top_k, prefix_m = None))]
    fn search(&self, query: Vec<f64>, top_k: usize, prefix_m: Option<usize>) -> PyResult<Vec<(u64, f64)>> {
        let hits = drq_core::search(&query, &self.inner, top_k, prefix_m).py()?;
        Ok(hits.into_iter().map(|h| (h.id, h.distance)).collect())
    }

    /// mAP@R and precision@R for labelled queries.
    #[pyo3(signature = (queries, query_labels, r_cutoff, precision_at = Vec::new(), prefix_m = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        queries: Vec<Vec<f64>>,
        query_labels: Vec<Vec<i64>>,
        r_cutoff: usize,
        precision_at: Vec<usize>,
        prefix_m: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let q = features(queries, Some(query_labels))?;
        let opts = EvalOptions {
            precision_at,
            prefix_m,
            ..EvalOptions::new(r_cutoff)
        };
        let report = drq_core::evaluate(&q, &self.inner, &opts).py()?;
        let d = PyDict::new(py);
        d.set_item("map", report.map_at_r)?;
        d.set_item("precision_at", report.precision_at_r)?;
        d.set_item("pr_curve", report.pr_curve)?;
        Ok(d)
    }
}

/// `(index, codeword)` of the nearest codeword.
#[pyfunction]
fn hard_quantize(x: Vec<f64>, codebook: Vec<Vec<f64>>) -> PyResult<(usize, Vec<f64>)> {
    drq_core::hard_quantize(&x, &Codebook::from_rows(&codebook).py()?).py()
}

/// `(probabilities, expected codeword)` of the softmax assignment.
#[pyfunction]
fn soft_quantize(x: Vec<f64>, codebook: Vec<Vec<f64>>, gamma: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = drq_core::soft_quantize(&x, &Codebook::from_rows(&codebook).py()?, gamma).py()?;
    Ok((s.probs, s.expected))
}

#[pyfunction]
fn pack_codes<'py>(py: Python<'py>, codes: Vec<u32>, k: usize) -> PyResult<Bound<'py, PyBytes>> {
    let bytes = drq_core::pack_codes(&drq_core::CodeSequence::new(codes), k).py()?;
    Ok(PyBytes::new(py, &bytes))
}

#[pyfunction]
fn unpack_codes(data: &[u8], k: usize, levels: usize) -> PyResult<Vec<u32>> {
    Ok(drq_core::unpack_codes(data, k, levels).py()?.into_inner())
}

/// `(rows, labels)` of a seeded Gaussian mixture.
#[pyfunction]
#[pyo3(signature = (n, d, clusters, spread = 0.1, seed = 0))]
fn synth_dataset(n: usize, d: usize, clusters: usize, spread: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<i64>)> {
    let f = drq_core::synth_dataset(n, d, clusters, spread, seed).py()?;
    Ok((rows_of(f.as_slice(), d), f.labels().unwrap_or(&[]).to_vec()))
}

/// Trains a model; returns `(model, summary)`.
#[pyfunction]
#[pyo3(signature = (
    rows, k, m, seed = 0, gamma = 20.0, lr = 0.001, batch_size = 256,
    epochs_stage2 = 10, epochs_stage3 = 20, loss_flags = "hard,soft,joint", init = "kmeans",
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    rows: Vec<Vec<f64>>,
    k: usize,
    m: usize,
    seed: u64,
    gamma: f64,
    lr: f64,
    batch_size: usize,
    epochs_stage2: usize,
    epochs_stage3: usize,
    loss_flags: &str,
    init: &str,
) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let init = match init {
        "kmeans" => CodebookInit::KMeans { iters: 25 },
        "random" => CodebookInit::Random,
        other => return Err(PyValueError::new_err(format!("unknown init {other:?}"))),
    };
    let cfg = TrainConfig {
        k,
        m,
        seed,
        gamma,
        lr,
        batch_size,
        epochs_stage2,
        epochs_stage3,
        loss_flags: loss_flags.parse().py()?,
        init,
        ..TrainConfig::default()
    };
    let f = features(rows, None)?;
    let out = py.detach(|| drq_core::train(&f, &cfg, None)).py()?;
    let summary = PyDict::new(py);
    summary.set_item("init_e_hard", out.init_e_hard)?;
    summary.set_item("final_e_hard", out.final_e_hard)?;
    summary.set_item("epochs", out.log.len())?;
    Ok((PyModel { inner: out.model }, summary))
}

#[pymodule]
fn drq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDatabase>()?;
    m.add_function(wrap_pyfunction!(hard_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(soft_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(pack_codes, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_codes, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
