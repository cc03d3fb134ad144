//! Python bindings: synthetic data, schema fitting, pretraining, embedding,
//! the RFM baseline and evaluation metrics.

use std::path::{Path, PathBuf};

use caspr_core::autodiff::Real;
use caspr_core::ingest::{fit_schema, prepare_sequences, read_csv_path, EntitySequence, FittedSchema, Schema};
use caspr_core::metrics::{self, LabeledSet, MetricsReport, RankingCase, Task};
use caspr_core::pretrain::{initial_checkpoint, resume, AnyCheckpoint, Checkpoint, TrainConfig, TrainError};
use caspr_core::synthgen::{self, SynthConfig};
use caspr_core::transformer::{Model as CoreModel, ModelConfig, Precision};
use caspr_core::{rfm as core_rfm, Error};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(caspr, CasprError, PyException, "Raised for any library failure other than I/O.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => CasprError::new_err(format!("{}: {other}", other.kind())),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for caspr_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn report_dict<'py>(py: Python<'py>, report: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in &report.entries {
        d.set_item(k, v)?;
    }
    Ok(d)
}

fn sequences(data: &Path, fitted: &FittedSchema, t: usize) -> caspr_core::Result<Vec<EntitySequence>> {
    let rows = read_csv_path(data, &fitted.schema()?)?;
    prepare_sequences(&rows, fitted, t)
}

/// Vocabularies and normalization statistics fitted on a dataset.
#[pyclass(name = "FittedSchema", module = "caspr", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFitted(FittedSchema);

#[pymethods]
impl PyFitted {
    /// Fits on the CSV at `data` described by the schema JSON at `schema`.
    #[staticmethod]
    fn fit(schema: PathBuf, data: PathBuf) -> PyResult<Self> {
        let schema = Schema::load(&schema).py()?;
        let rows = read_csv_path(&data, &schema).py()?;
        Ok(Self(fit_schema(&rows, &schema).py()?))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self(FittedSchema::from_json(text).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(FittedSchema::load(&path).py()?))
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    /// Known values of a categorical column; code 0 is reserved for unseen values.
    fn vocab(&self, column: &str) -> PyResult<Vec<String>> {
        self.0
            .vocab(column)
            .map(|v| v.values.clone())
            .ok_or_else(|| to_py(Error::SchemaMismatch(format!("no categorical column `{column}`"))))
    }

    fn __repr__(&self) -> String {
        format!(
            "FittedSchema(columns={}, categorical={}, numerical={})",
            self.0.columns.len(),
            self.0.categorical.len() + self.0.static_categorical.len(),
            self.0.numerical.len() + self.0.static_numerical.len()
        )
    }
}

fn advance<T: Real>(ck: &mut Checkpoint<T>, seqs: &[EntitySequence], train: &TrainConfig) -> caspr_core::Result<Vec<f64>> {
    match resume(ck.clone(), seqs, train) {
        Ok(o) => {
            *ck = o.checkpoint;
            Ok(o.log.iter().map(|e| e.mean_loss).collect())
        }
        Err(TrainError::Diverged { epoch, reason, last_good }) => {
            *ck = *last_good;
            Err(Error::Numeric(format!("training diverged in epoch {epoch}: {reason}")))
        }
        Err(TrainError::Failed(e)) => Err(e),
    }
}

fn fresh<T: Real>(config: ModelConfig, fitted: FittedSchema, seed: u64) -> caspr_core::Result<Checkpoint<T>> {
    let train = TrainConfig { seed, ..Default::default() };
    Ok(initial_checkpoint(CoreModel::new(config, fitted, seed)?, &train))
}

/// A transformer model together with its optimizer and RNG state.
#[pyclass(name = "Model", module = "caspr")]
struct PyModel(AnyCheckpoint);

#[pymethods]
impl PyModel {
    /// `config` is a JSON object of model settings; missing keys take defaults.
    #[new]
    #[pyo3(signature = (fitted, config = None, seed = 0))]
    fn new(fitted: &PyFitted, config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| to_py(e.into()))?,
            None => ModelConfig::default(),
        };
        let fitted = fitted.0.clone();
        let ck = match cfg.precision {
            Precision::F32 => AnyCheckpoint::F32(fresh(cfg, fitted, seed).py()?),
            Precision::F64 => AnyCheckpoint::F64(fresh(cfg, fitted, seed).py()?),
        };
        Ok(Self(ck))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(AnyCheckpoint::load(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        match &self.0 {
            AnyCheckpoint::F32(c) => c.save(&path),
            AnyCheckpoint::F64(c) => c.save(&path),
        }
        .py()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.0.epoch()
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(self.0.config()).expect("config serializes")
    }

    #[getter]
    fn fitted(&self) -> PyFitted {
        PyFitted(self.0.fitted().clone())
    }

    /// Runs `epochs` more epochs on the CSV at `data`; returns the mean loss
    /// of each. On divergence the model keeps the last good state.
    #[pyo3(signature = (data, epochs, batch_size = 256, workers = 1, lr = 1e-3))]
    fn pretrain(
        &mut self,
        py: Python<'_>,
        data: PathBuf,
        epochs: u64,
        batch_size: usize,
        workers: usize,
        lr: f64,
    ) -> PyResult<Vec<f64>> {
        let ck = &mut self.0;
        py.detach(|| {
            let seqs = sequences(&data, ck.fitted(), ck.config().t)?;
            let train = TrainConfig {
                epochs: ck.epoch() + epochs,
                batch_size,
                workers,
                lr,
                ..Default::default()
            };
            match ck {
                AnyCheckpoint::F32(c) => advance(c, &seqs, &train),
                AnyCheckpoint::F64(c) => advance(c, &seqs, &train),
            }
        })
        .py()
    }

    /// Entity ids (sorted) and their embedding vectors.
    fn embed(&self, py: Python<'_>, data: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let ck = &self.0;
        let recs = py
            .detach(|| {
                let seqs = sequences(&data, ck.fitted(), ck.config().t)?;
                match ck {
                    AnyCheckpoint::F32(c) => c.model.embed(&seqs),
                    AnyCheckpoint::F64(c) => c.model.embed(&seqs),
                }
            })
            .py()?;
        Ok(recs.into_iter().map(|r| (r.entity, r.vector)).unzip())
    }

    fn __repr__(&self) -> String {
        let c = self.0.config();
        format!(
            "Model(hidden={}, layers={}, heads={}, emb_out={}, epoch={})",
            c.hidden,
            c.layers,
            c.heads,
            c.emb_out,
            self.0.epoch()
        )
    }
}

/// Writes `data.csv`, `schema.json` and `labels.csv` into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, n_entities = 2000, seed = 7, signal = "trend_churn", t_mean = 8))]
fn synth(out_dir: PathBuf, n_entities: usize, seed: u64, signal: &str, t_mean: usize) -> PyResult<()> {
    let cfg = SynthConfig {
        n_entities,
        seed,
        signal: signal.parse().py()?,
        t_mean,
        ..Default::default()
    };
    synthgen::generate(&cfg).py()?.write(&out_dir).py()
}

/// Recency/frequency/monetary features: entity ids and one row per entity.
#[pyfunction]
fn rfm(schema: PathBuf, data: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
    let schema = Schema::load(&schema).py()?;
    let rows = read_csv_path(&data, &schema).py()?;
    let t = core_rfm::rfm_table(&rows, &schema).py()?;
    Ok((t.entities, t.rows.iter().map(|r| r.to_vec()).collect()))
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).py()
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.5))]
fn f1_positive(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<f64> {
    metrics::f1_positive(&scores, &labels, threshold).py()
}

#[pyfunction]
fn rmse(preds: Vec<f64>, targets: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&preds, &targets).py()
}

/// `cases` is a list of `(ranked_ids, relevant_ids)` pairs.
#[pyfunction]
fn ranking_metrics<'py>(py: Python<'py>, cases: Vec<(Vec<String>, Vec<String>)>) -> PyResult<Bound<'py, PyDict>> {
    let cases: Vec<RankingCase> = cases
        .into_iter()
        .enumerate()
        .map(|(i, (ranked, relevant))| RankingCase {
            entity: i.to_string(),
            ranked,
            relevant: relevant.into_iter().collect(),
        })
        .collect();
    report_dict(py, &metrics::ranking_metrics(&cases).py()?.to_report())
}

/// Linear probe on a seeded 70/30 split.
#[pyfunction]
#[pyo3(signature = (features, labels, task = "binary", seed = 0))]
fn evaluate<'py>(
    py: Python<'py>,
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    task: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let task: Task = task.parse().py()?;
    let entities = (0..features.len()).map(|i| i.to_string()).collect();
    let set = LabeledSet::new(entities, features, labels).py()?;
    report_dict(py, &metrics::evaluate(&set, task, seed).py()?)
}

#[pymodule]
fn caspr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CasprError", m.py().get_type::<CasprError>())?;
    m.add("RFM_FEATURES", core_rfm::FEATURE_NAMES.to_vec())?;
    m.add_class::<PyFitted>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(rfm, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_positive, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
