//! Python bindings over the core crate: the main data/retrieval/model types
//! plus the pipeline commands, enough to drive a full run and poke at the
//! pieces from a script.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use retrokb::backbone::BackboneModel;
use retrokb::cli::{self, Paths};
use retrokb::config::RunConfig;
use retrokb::data;
use retrokb::error::Error;
use retrokb::kb::KnowledgeBase;
use retrokb::retrieval::{self, SearchPoolIndex};
use retrokb::{eval, teacher};

fn to_py_err(e: Error) -> PyErr {
    match &e {
        Error::Io(_) | Error::MissingArtifact { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Run configuration with the shipped defaults; settable via key=value
/// overrides using the same grammar as the CLI's --set flag.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::load(&p).map_err(to_py_err)?,
            None => RunConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    /// Apply one `key=value` override (TOML value grammar).
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner = self
            .inner
            .with_overrides(&[format!("{key}={value}")])
            .map_err(to_py_err)?;
        Ok(())
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(num_samples={}, k={}, alpha={}, backbone={})",
            self.inner.num_samples, self.inner.k, self.inner.alpha, self.inner.backbone
        )
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generate from a config's synthetic spec.
    #[staticmethod]
    fn generate(cfg: &PyConfig) -> PyResult<Self> {
        let inner = data::generate_synthetic(&cfg.inner.synthetic_spec()).map_err(to_py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: data::read_dataset(&path).map_err(to_py_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(&self.inner, &path).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_fields(&self) -> usize {
        self.inner.num_fields()
    }

    #[getter]
    fn vocab_size(&self) -> u32 {
        self.inner.vocab_size
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels()
    }

    /// (features, label) of the i-th sample.
    fn sample(&self, i: usize) -> PyResult<(Vec<u32>, u8)> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))?;
        Ok((s.features.clone(), s.label))
    }

    /// Temporal split into (pool, train, test).
    fn split(&self, cut1: f64, cut2: f64) -> PyResult<(PyDataset, PyDataset, PyDataset)> {
        let split = data::split_temporal(&self.inner, cut1, cut2).map_err(to_py_err)?;
        Ok((
            PyDataset { inner: split.pool },
            PyDataset { inner: split.train },
            PyDataset { inner: split.test },
        ))
    }
}

/// Inverted index over a pool dataset, queried by feature lists.
#[pyclass(name = "Index")]
struct PyIndex {
    inner: SearchPoolIndex,
    num_fields: usize,
}

#[pymethods]
impl PyIndex {
    #[new]
    fn new(pool: &PyDataset) -> PyResult<Self> {
        let inner = retrieval::build_index(&pool.inner).map_err(to_py_err)?;
        Ok(PyIndex { inner, num_fields: pool.inner.num_fields() })
    }

    /// Exact top-k by feature-overlap count: (neighbor_ids, scores).
    fn retrieve(&self, features: Vec<u32>, k: usize) -> PyResult<(Vec<u64>, Vec<f64>)> {
        let query = data::Sample { features, label: 0, sample_id: u64::MAX };
        if query.features.len() != self.num_fields {
            return Err(PyValueError::new_err(format!(
                "query has {} fields, pool has {}",
                query.features.len(),
                self.num_fields
            )));
        }
        let r = self.inner.retrieve_topk(&query, k).map_err(to_py_err)?;
        Ok((r.neighbor_ids, r.scores))
    }

    #[getter]
    fn query_count(&self) -> u64 {
        self.inner.query_count()
    }
}

#[pyclass(name = "KnowledgeBase")]
struct PyKnowledgeBase {
    inner: KnowledgeBase,
}

#[pymethods]
impl PyKnowledgeBase {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyKnowledgeBase { inner: retrokb::kb::load_kb(&path).map_err(to_py_err)? })
    }

    /// z = g(f(x)) for a feature-id list.
    fn encode(&self, features: Vec<u32>) -> PyResult<Vec<f64>> {
        let s = data::Sample { features, label: 0, sample_id: 0 };
        self.inner.encode(&s).map_err(to_py_err)
    }

    #[getter]
    fn out_width(&self) -> usize {
        self.inner.dims.out_width
    }
}

#[pyclass(name = "Backbone")]
struct PyBackbone {
    inner: BackboneModel,
}

#[pymethods]
impl PyBackbone {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBackbone { inner: retrokb::backbone::load_backbone(&path).map_err(to_py_err)? })
    }

    /// Click probability for a feature-id list; pass the knowledge base when
    /// the model was trained with integration on.
    #[pyo3(signature = (features, kb=None))]
    fn predict(&self, features: Vec<u32>, kb: Option<&PyKnowledgeBase>) -> PyResult<f64> {
        let s = data::Sample { features, label: 0, sample_id: 0 };
        self.inner.predict(kb.map(|k| &k.inner), &s).map_err(to_py_err)
    }
}

#[pyclass(name = "Teacher")]
struct PyTeacher {
    inner: teacher::TeacherModel,
}

#[pymethods]
impl PyTeacher {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTeacher { inner: teacher::load_teacher(&path).map_err(to_py_err)? })
    }

    /// Retrieve K neighbors from the index, aggregate, and predict.
    fn predict(&self, index: &PyIndex, features: Vec<u32>, k: usize) -> PyResult<f64> {
        let s = data::Sample { features, label: 0, sample_id: u64::MAX };
        let result = index.inner.retrieve_topk(&s, k).map_err(to_py_err)?;
        let neighbors = index.inner.resolve(&result);
        let r = self.inner.aggregate(&s, &neighbors).map_err(to_py_err)?;
        self.inner.predict(&s, &r).map_err(to_py_err)
    }
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auc(&scores, &labels).map_err(to_py_err)
}

#[pyfunction]
fn logloss(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::logloss(&scores, &labels).map_err(to_py_err)
}

#[pyfunction]
fn rel_impr(measured_auc: f64, base_auc: f64) -> PyResult<f64> {
    eval::rel_impr(measured_auc, base_auc).map_err(to_py_err)
}

/// Overlap count between two feature lists (the retrieval score).
#[pyfunction]
fn overlap_score(a: Vec<u32>, b: Vec<u32>) -> PyResult<f64> {
    let qa = data::Sample { features: a, label: 0, sample_id: 0 };
    let qb = data::Sample { features: b, label: 0, sample_id: 1 };
    retrieval::score(&qa, &qb).map_err(to_py_err)
}

fn paths_for(artifact_dir: PathBuf) -> Paths {
    Paths::new(artifact_dir)
}

#[pyfunction]
fn gen_data(cfg: &PyConfig, artifact_dir: PathBuf) -> PyResult<()> {
    cli::cmd_gen_data(&cfg.inner, &paths_for(artifact_dir)).map_err(to_py_err)
}

#[pyfunction]
fn pretrain_teacher(cfg: &PyConfig, artifact_dir: PathBuf) -> PyResult<()> {
    cli::cmd_pretrain_teacher(&cfg.inner, &paths_for(artifact_dir)).map_err(to_py_err)
}

#[pyfunction]
fn build_kb(cfg: &PyConfig, artifact_dir: PathBuf) -> PyResult<()> {
    cli::cmd_build_kb(&cfg.inner, &paths_for(artifact_dir)).map_err(to_py_err)
}

#[pyfunction]
fn train_backbone(cfg: &PyConfig, artifact_dir: PathBuf) -> PyResult<()> {
    cli::cmd_train_backbone(&cfg.inner, &paths_for(artifact_dir)).map_err(to_py_err)
}

/// Evaluate on the test slice: {model: {"auc": ..., "logloss": ..., "n": ...}}.
#[pyfunction]
#[pyo3(signature = (cfg, artifact_dir, base_auc=None))]
fn evaluate<'py>(
    py: Python<'py>,
    cfg: &PyConfig,
    artifact_dir: PathBuf,
    base_auc: Option<f64>,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let reports = cli::compute_eval_reports(&cfg.inner, &paths_for(artifact_dir), base_auc)
        .map_err(to_py_err)?;
    let out = pyo3::types::PyDict::new(py);
    for r in reports {
        let row = pyo3::types::PyDict::new(py);
        row.set_item("auc", r.auc)?;
        row.set_item("logloss", r.logloss)?;
        row.set_item("n", r.n)?;
        if let Some(rel) = r.rel_impr {
            row.set_item("rel_impr", rel)?;
        }
        out.set_item(r.model, row)?;
    }
    Ok(out)
}

/// gen-data, pretrain-teacher, build-kb, train-backbone, eval, in order.
#[pyfunction]
fn run_pipeline<'py>(
    py: Python<'py>,
    cfg: &PyConfig,
    artifact_dir: PathBuf,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let paths = paths_for(artifact_dir.clone());
    cli::run_pipeline(&cfg.inner, &paths).map_err(to_py_err)?;
    evaluate(py, cfg, artifact_dir, None)
}

#[pymodule]
fn retrokb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyIndex>()?;
    m.add_class::<PyKnowledgeBase>()?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyTeacher>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add_function(wrap_pyfunction!(rel_impr, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_score, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(build_kb, m)?)?;
    m.add_function(wrap_pyfunction!(train_backbone, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
