//! Python module `lightfmp`: schemas, datasets, configs, the end-to-end run,
//! pruning, checkpoints and metrics.

use std::path::PathBuf;
use std::sync::Arc;

use lightfmp_core::checkpoint::{peek_header, Checkpoint, Phase};
use lightfmp_core::config::RunConfig;
use lightfmp_core::data::{generate_synthetic, load_dataset, Batch, Dataset, FieldSchema, SyntheticSpec};
use lightfmp_core::metrics::{auc, mean_logloss, EvalResult};
use lightfmp_core::pipeline::{self, evaluate, PruneMask};
use lightfmp_core::real::{DType, Real};
use lightfmp_core::report::MaskFile;
use lightfmp_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(lightfmp, LightFmpError, PyException);

fn err(e: Error) -> PyErr {
    LightFmpError::new_err(format!("[{}] {e}", e.kind()))
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for lightfmp_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn eval_to_py<'py>(py: Python<'py>, value: &EvalResult) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "FieldSchema", module = "lightfmp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySchema(Arc<FieldSchema>);

#[pymethods]
impl PySchema {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(Arc::new(FieldSchema::load(path).py()?)))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self(Arc::new(FieldSchema::from_toml_str(text).py()?)))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).py()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.0.names()
    }

    #[getter]
    fn hash(&self) -> String {
        format!("{:016x}", self.0.hash())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("FieldSchema({} fields)", self.0.len())
    }
}

#[pyclass(name = "Dataset", module = "lightfmp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(Arc<Dataset>);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf, schema: &PySchema) -> PyResult<Self> {
        Ok(Self(Arc::new(load_dataset(path, schema.0.clone()).py()?)))
    }

    /// Logistic ground truth in which only `informative` fields matter.
    #[staticmethod]
    #[pyo3(signature = (fields, informative, rows, seed=1, cardinality=10, weight_scale=1.5, noise_std=0.1))]
    fn synthetic(
        fields: usize,
        informative: Vec<usize>,
        rows: usize,
        seed: u64,
        cardinality: u32,
        weight_scale: f64,
        noise_std: f64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            weight_scale,
            noise_std,
            ..SyntheticSpec::uniform(fields, informative, cardinality, rows, seed)
        };
        Ok(Self(Arc::new(generate_synthetic(&spec).py()?)))
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_csv(path).py()
    }

    #[getter]
    fn schema(&self) -> PySchema {
        PySchema(self.0.schema_arc())
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn positive_rate(&self) -> f64 {
        self.0.positive_rate()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} rows, {} fields)", self.0.len(), self.0.schema().len())
    }
}

#[pyclass(name = "RunConfig", module = "lightfmp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(RunConfig);

#[pymethods]
impl PyConfig {
    /// TOML text plus `key=value` overrides, e.g. `["tau=0.75", "pretrain.epochs=5"]`.
    #[new]
    #[pyo3(signature = (toml="", overrides=Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self(RunConfig::with_overrides(toml, &overrides).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(RunConfig::load(path).py()?))
    }

    /// Copy with more overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self(RunConfig::with_overrides(&self.0.to_toml_string(), &overrides).py()?))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau
    }

    #[getter]
    fn f64(&self) -> bool {
        self.0.f64
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(tau={}, f64={})", self.0.tau, self.0.f64)
    }
}

#[pyclass(name = "PruneMask", module = "lightfmp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMask(PruneMask);

#[pymethods]
impl PyMask {
    #[getter]
    fn keep(&self) -> Vec<bool> {
        self.0.keep.clone()
    }

    #[getter]
    fn importance(&self) -> Vec<f64> {
        self.0.importance.clone()
    }

    #[getter]
    fn retained_count(&self) -> usize {
        self.0.retained_count
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau
    }

    fn kept_fields(&self) -> Vec<usize> {
        self.0.kept_fields()
    }

    /// Writes `mask.json` for `schema`.
    fn save(&self, path: PathBuf, schema: &PySchema) -> PyResult<()> {
        MaskFile::new(&self.0, &schema.0).save(path).py()
    }

    #[staticmethod]
    fn load(path: PathBuf, schema: &PySchema) -> PyResult<Self> {
        let file = MaskFile::load(path).py()?;
        file.check_schema(&schema.0).py()?;
        Ok(Self(file.to_mask().py()?))
    }

    fn __repr__(&self) -> String {
        format!("PruneMask(kept={:?}, tau={})", self.0.kept_fields(), self.0.tau)
    }
}

#[derive(Clone)]
enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

macro_rules! each {
    ($self:expr, $c:ident => $body:expr) => {
        match $self {
            AnyCheckpoint::F32($c) => $body,
            AnyCheckpoint::F64($c) => $body,
        }
    };
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Base => "base",
        Phase::Pretrained => "pretrained",
        Phase::Pruned => "pruned",
        Phase::Final => "final",
    }
}

/// A model as stored in a checkpoint, with its gate or mask when present.
#[pyclass(name = "Model", module = "lightfmp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(AnyCheckpoint);

/// A full model that still has its gate is scored under the noise-free mask.
fn gate_mask<T: Real>(c: &Checkpoint<T>) -> Option<Vec<T>> {
    let full = c.model.fields().len() == c.model.schema().len();
    c.gate.as_ref().filter(|_| full).map(|g| g.deterministic_mask())
}

fn probabilities<T: Real>(c: &Checkpoint<T>, data: &Dataset) -> PyResult<Vec<f64>> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let batch = Batch::from_view(&data.view(), &rows);
    let z = gate_mask(c);
    let logits = c.model.logits(&batch, z.as_deref()).py()?;
    Ok(logits.iter().map(|&x| lightfmp_core::real::sigmoid(x).f64()).collect())
}

fn score<T: Real>(c: &Checkpoint<T>, data: &Dataset) -> lightfmp_core::Result<EvalResult> {
    evaluate(&c.model, data.view(), gate_mask(c).as_deref())
}

impl PyModel {
    fn check_schema(&self, data: &Dataset) -> PyResult<()> {
        let same = each!(&self.0, c => c.model.schema().hash() == data.schema().hash());
        if same {
            Ok(())
        } else {
            Err(err(Error::Schema("dataset schema differs from the model's".into())))
        }
    }
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint in whichever precision it was stored.
    #[staticmethod]
    fn load(path: PathBuf, schema: &PySchema) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| err(Error::artifact(&path, e.to_string())))?;
        let header = peek_header(&bytes).map_err(|e| err(Error::artifact(&path, e.to_string())))?;
        let s = schema.0.clone();
        Ok(Self(match header.dtype {
            DType::F32 => AnyCheckpoint::F32(Checkpoint::load(&path, s).py()?),
            DType::F64 => AnyCheckpoint::F64(Checkpoint::load(&path, s).py()?),
        }))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        each!(&self.0, c => c.save(path).py())
    }

    #[getter]
    fn phase(&self) -> &'static str {
        each!(&self.0, c => phase_name(c.phase))
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        match self.0 {
            AnyCheckpoint::F32(_) => "f32",
            AnyCheckpoint::F64(_) => "f64",
        }
    }

    /// Schema indices of the fields the model reads.
    #[getter]
    fn fields(&self) -> Vec<usize> {
        each!(&self.0, c => c.model.fields().to_vec())
    }

    #[getter]
    fn num_params(&self) -> usize {
        each!(&self.0, c => c.model.num_params())
    }

    /// Noise-free gate value per field, if the model carries a gate.
    fn gate_values(&self) -> Option<Vec<f64>> {
        each!(&self.0, c => c.gate.as_ref().map(|g| g.deterministic_mask().iter().map(|v| v.f64()).collect()))
    }

    #[getter]
    fn mask(&self) -> Option<PyMask> {
        each!(&self.0, c => c.mask.clone().map(PyMask))
    }

    /// Click probability per row of `data`.
    fn predict(&self, py: Python<'_>, data: &PyDataset) -> PyResult<Vec<f64>> {
        self.check_schema(&data.0)?;
        py.detach(|| each!(&self.0, c => probabilities(c, &data.0)))
    }

    /// AUC, logloss, row and positive counts over `data`.
    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        self.check_schema(&data.0)?;
        let res = py.detach(|| each!(&self.0, c => score(c, &data.0))).py()?;
        eval_to_py(py, &res)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {}, {} fields)", self.phase(), self.dtype(), self.fields().len())
    }
}

/// Keeps the fields with the largest noise-free gate values and copies
/// their weights into a smaller model.
#[pyfunction]
fn prune(model: &PyModel, tau: f64) -> PyResult<(PyModel, PyMask)> {
    fn go<T: Real>(c: &Checkpoint<T>, tau: f64) -> PyResult<(Checkpoint<T>, PruneMask)> {
        let gate = c
            .gate
            .as_ref()
            .filter(|_| c.model.fields().len() == c.model.schema().len())
            .ok_or_else(|| err(Error::Config("pruning needs a full model with a gate".into())))?;
        let (pruned, mask) = pipeline::prune(&c.model, gate, tau).py()?;
        let mut out = Checkpoint::new(Phase::Pruned, pruned);
        out.gate = Some(gate.clone());
        out.mask = Some(mask.clone());
        Ok((out, mask))
    }
    let (ckpt, mask) = match &model.0 {
        AnyCheckpoint::F32(c) => go(c, tau).map(|(c, m)| (AnyCheckpoint::F32(c), m))?,
        AnyCheckpoint::F64(c) => go(c, tau).map(|(c, m)| (AnyCheckpoint::F64(c), m))?,
    };
    Ok((PyModel(ckpt), PyMask(mask)))
}

/// Outcome of `run_all`.
#[pyclass(name = "RunResult", module = "lightfmp", frozen)]
struct PyRunResult {
    report: String,
    mask: PruneMask,
    pretrained: PyModel,
    pruned: PyModel,
    final_model: PyModel,
    baseline: Option<PyModel>,
}

#[pymethods]
impl PyRunResult {
    /// The run report as a dict, same content as `report.json`.
    #[getter]
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        py.import("json")?.call_method1("loads", (self.report.as_str(),))
    }

    fn report_json(&self) -> String {
        self.report.clone()
    }

    #[getter]
    fn mask(&self) -> PyMask {
        PyMask(self.mask.clone())
    }

    #[getter]
    fn pretrained(&self) -> PyModel {
        self.pretrained.clone()
    }

    #[getter]
    fn pruned(&self) -> PyModel {
        self.pruned.clone()
    }

    #[getter(final_model)]
    fn final_model(&self) -> PyModel {
        self.final_model.clone()
    }

    #[getter]
    fn baseline(&self) -> Option<PyModel> {
        self.baseline.clone()
    }
}

fn run_typed<T: Real>(
    data: &Dataset,
    cfg: &RunConfig,
    wrap: fn(Checkpoint<T>) -> AnyCheckpoint,
) -> lightfmp_core::Result<PyRunResult> {
    let art = pipeline::run_all::<T>(data, cfg)?;
    let mut pretrained = Checkpoint::new(Phase::Pretrained, art.pretrained.model);
    pretrained.gate = Some(art.pretrained.gate.clone());
    let mut pruned = Checkpoint::new(Phase::Pruned, art.pruned);
    pruned.gate = Some(art.pretrained.gate);
    pruned.mask = Some(art.mask.clone());
    let mut final_model = Checkpoint::new(Phase::Final, art.continued.model);
    final_model.mask = Some(art.mask.clone());
    Ok(PyRunResult {
        report: serde_json::to_string_pretty(&art.report)?,
        mask: art.mask,
        pretrained: PyModel(wrap(pretrained)),
        pruned: PyModel(wrap(pruned)),
        final_model: PyModel(wrap(final_model)),
        baseline: art.baseline.map(|b| PyModel(wrap(Checkpoint::new(Phase::Final, b.model)))),
    })
}

/// Split, pretrain with the gate, prune, continue training and evaluate.
#[pyfunction]
fn run_all(py: Python<'_>, data: &PyDataset, config: &PyConfig) -> PyResult<PyRunResult> {
    let (data, cfg) = (&data.0, &config.0);
    py.detach(|| {
        if cfg.f64 {
            run_typed::<f64>(data, cfg, AnyCheckpoint::F64)
        } else {
            run_typed::<f32>(data, cfg, AnyCheckpoint::F32)
        }
    })
    .py()
}

/// Mann-Whitney AUC; ties count one half.
#[pyfunction(name = "auc")]
fn py_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    auc(&scores, &labels).py()
}

#[pyfunction]
fn logloss(probs: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    mean_logloss(&probs, &labels).py()
}

/// Fields kept out of `m` at pruning ratio `tau`.
#[pyfunction]
fn retained_count(m: usize, tau: f64) -> usize {
    pipeline::retained_count(m, tau)
}

#[pymodule]
fn lightfmp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LightFmpError", m.py().get_type::<LightFmpError>())?;
    m.add_class::<PySchema>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(py_auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add_function(wrap_pyfunction!(retained_count, m)?)?;
    Ok(())
}
