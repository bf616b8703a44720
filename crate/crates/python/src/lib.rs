//! Python bindings: taxonomies, datasets, models, training, evaluation and
//! the gradient check. Configs go in and reports come out as plain dicts.

use std::path::PathBuf;

use hmil::cli::{gradcheck_report, RunConfig};
use hmil::{
    AnyModel, Checkpoint, FlatConfig, FlatModel, FlatVariant, HmilConfig, HmilError, HmilModel, LabelLevel, Split,
    SplitScheme, StratifyOn, SyntheticConfig, TrainConfig,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyTuple};
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(pyhmil, HmilException, PyException);

fn err(e: HmilError) -> PyErr {
    HmilException::new_err(e.to_string())
}

fn value_err(msg: impl ToString) -> PyErr {
    HmilException::new_err(msg.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Overlays a dict's keys onto `base` and deserializes the result.
fn merge<T: Serialize + DeserializeOwned>(base: &T, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let mut value = serde_json::to_value(base).map_err(value_err)?;
    if let Some(d) = overrides {
        let text: String = d.py().import("json")?.call_method1("dumps", (d,))?.extract()?;
        let patch: serde_json::Value = serde_json::from_str(&text).map_err(value_err)?;
        overlay(&mut value, patch);
    }
    serde_json::from_value(value).map_err(value_err)
}

fn overlay(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<hmil::tensor::Matrix> {
    hmil::tensor::Matrix::from_rows(&rows).map_err(err)
}

#[pyclass(name = "Taxonomy", module = "pyhmil", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTaxonomy(hmil::Taxonomy);

#[pymethods]
impl PyTaxonomy {
    /// `pairs` lists `(fine, coarse)` name pairs.
    #[new]
    fn new(coarse: Vec<String>, fine: Vec<String>, pairs: Vec<(String, String)>) -> PyResult<Self> {
        hmil::Taxonomy::build(&coarse, &fine, &pairs).map(PyTaxonomy).map_err(err)
    }

    #[staticmethod]
    fn balanced(k_coarse: usize, k_fine: usize) -> PyResult<Self> {
        hmil::Taxonomy::balanced(k_coarse, k_fine).map(PyTaxonomy).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        hmil::Taxonomy::load(&path).map(PyTaxonomy).map_err(err)
    }

    #[getter]
    fn num_coarse(&self) -> usize {
        self.0.num_coarse()
    }

    #[getter]
    fn num_fine(&self) -> usize {
        self.0.num_fine()
    }

    #[getter]
    fn coarse_names(&self) -> Vec<String> {
        self.0.coarse_names().to_vec()
    }

    #[getter]
    fn fine_names(&self) -> Vec<String> {
        self.0.fine_names().to_vec()
    }

    fn parent(&self, fine: usize) -> PyResult<usize> {
        if fine >= self.0.num_fine() {
            return Err(value_err(format!("fine index {fine} out of range")));
        }
        Ok(self.0.parent(fine))
    }

    /// The `K_c x K_f` 0/1 projection matrix, as nested lists.
    fn projection(&self) -> Vec<Vec<f64>> {
        self.0.projection().matrix().to_rows()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.to_doc())
    }

    fn __repr__(&self) -> String {
        format!("Taxonomy(num_coarse={}, num_fine={})", self.0.num_coarse(), self.0.num_fine())
    }
}

#[pyclass(name = "Dataset", module = "pyhmil", frozen)]
struct PyDataset(hmil::Dataset);

#[pymethods]
impl PyDataset {
    /// Synthetic benchmark for `seed`; `config` keys override its fields.
    #[staticmethod]
    #[pyo3(signature = (seed=0, config=None))]
    fn synthetic(seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: SyntheticConfig = merge(&SyntheticConfig::benchmark(seed), config)?;
        hmil::generate_synthetic(&cfg).map(PyDataset).map_err(err)
    }

    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        hmil::load_dataset(&manifest).map(PyDataset).map_err(err)
    }

    /// Writes bag files and a manifest into `dir`; returns the manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        self.0.save(&dir).map_err(err)
    }

    /// Stratified ratio split.
    #[pyo3(signature = (train=0.7, val=0.1, test=0.2, seed=0, stratify_on="fine"))]
    fn with_splits(&self, train: f64, val: f64, test: f64, seed: u64, stratify_on: &str) -> PyResult<Self> {
        self.split_by(SplitScheme::Ratio { train, val, test }, seed, stratify_on)
    }

    /// Fold `fold` of `k` is the test set, the next fold the validation set.
    #[pyo3(signature = (k, fold, seed=0, stratify_on="fine"))]
    fn with_kfold(&self, k: usize, fold: usize, seed: u64, stratify_on: &str) -> PyResult<Self> {
        self.split_by(SplitScheme::KFold { k, fold }, seed, stratify_on)
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d
    }

    #[getter]
    fn taxonomy(&self) -> PyTaxonomy {
        PyTaxonomy(self.0.taxonomy.clone())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn split_counts(&self) -> Vec<(String, usize)> {
        self.0.split_counts().into_iter().map(|(s, n)| (s.as_str().to_string(), n)).collect()
    }

    /// `(bag_id, features, y_f, y_c, split)` for bag `i`.
    fn bag<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyTuple>> {
        let b = self.0.bags.get(i).ok_or_else(|| value_err(format!("bag index {i} out of range")))?;
        (b.bag_id.clone(), b.features.to_rows(), b.y_f, b.y_c, b.split.as_str()).into_pyobject(py)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(bags={}, d={})", self.0.len(), self.0.d)
    }
}

impl PyDataset {
    fn split_by(&self, scheme: SplitScheme, seed: u64, stratify_on: &str) -> PyResult<Self> {
        let on = match stratify_on {
            "fine" => StratifyOn::Fine,
            "coarse" => StratifyOn::Coarse,
            other => return Err(value_err(format!("stratify_on must be `fine` or `coarse`, got `{other}`"))),
        };
        hmil::make_splits(&self.0, scheme, seed, on).map(PyDataset).map_err(err)
    }
}

/// A trained or freshly initialized model bundled with its taxonomy.
#[pyclass(name = "Model", module = "pyhmil")]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (d, taxonomy, seed=0, use_ofr=true))]
    fn hmil(d: usize, taxonomy: &PyTaxonomy, seed: u64, use_ofr: bool) -> PyResult<Self> {
        let t = &taxonomy.0;
        let mut cfg = HmilConfig::new(d, t.num_coarse(), t.num_fine(), seed).map_err(err)?;
        if !use_ofr {
            cfg = cfg.without_ofr();
        }
        let model = HmilModel::init(cfg).map_err(err)?;
        Ok(PyModel(Checkpoint::new(AnyModel::Hmil(model), t.clone())))
    }

    /// Flat baseline: `variant` is `mean`, `max` or `abmil`; `level` is
    /// `fine` or `coarse`.
    #[staticmethod]
    #[pyo3(signature = (variant, d, taxonomy, level="fine", seed=0))]
    fn flat(variant: &str, d: usize, taxonomy: &PyTaxonomy, level: &str, seed: u64) -> PyResult<Self> {
        let variant = match variant {
            "mean" => FlatVariant::Mean,
            "max" => FlatVariant::Max,
            "abmil" => FlatVariant::Abmil,
            other => return Err(value_err(format!("unknown flat variant `{other}`"))),
        };
        let t = &taxonomy.0;
        let (level, k) = match level {
            "fine" => (LabelLevel::Fine, t.num_fine()),
            "coarse" => (LabelLevel::Coarse, t.num_coarse()),
            other => return Err(value_err(format!("level must be `fine` or `coarse`, got `{other}`"))),
        };
        let model = FlatModel::init(FlatConfig { variant, d, k, level, seed }).map_err(err)?;
        Ok(PyModel(Checkpoint::new(AnyModel::Flat(model), t.clone())))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(PyModel).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.model.kind()
    }

    #[getter]
    fn taxonomy(&self) -> PyTaxonomy {
        PyTaxonomy(self.0.taxonomy.clone())
    }

    /// HMIL: dict of attention maps, bag embeddings and both class
    /// distributions. Flat: the class distribution.
    fn forward<'py>(&self, py: Python<'py>, features: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
        let h = matrix(features)?;
        match &self.0.model {
            AnyModel::Hmil(m) => {
                let out = m.forward(&h, &self.0.taxonomy.projection()).map_err(err)?;
                let d = PyDict::new(py);
                d.set_item("a_c", out.a_c.to_rows())?;
                d.set_item("a_f", out.a_f.to_rows())?;
                d.set_item("b_c", out.b_c.to_rows())?;
                d.set_item("b_f", out.b_f.to_rows())?;
                d.set_item("p_c", out.p_c)?;
                d.set_item("p_f", out.p_f)?;
                Ok(d.into_any())
            }
            AnyModel::Flat(m) => Ok(m.forward(&h).map_err(err)?.into_pyobject(py)?.into_any()),
        }
    }

    /// Trains in place on the dataset's train split, keeping the epoch with
    /// the best validation score. Returns the training history.
    #[pyo3(signature = (dataset, config=None))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &PyDataset,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TrainConfig = merge(&TrainConfig::default(), config)?;
        self.0.check_compatible(&dataset.0).map_err(err)?;
        let ds = &dataset.0;
        let history = py.detach(|| -> Result<_, HmilError> {
            Ok(match &self.0.model {
                AnyModel::Hmil(m) => {
                    let (best, h) = hmil::train(m, ds, &cfg)?;
                    (AnyModel::Hmil(best), h)
                }
                AnyModel::Flat(m) => {
                    let (best, h) = hmil::train_flat(m, ds, &cfg)?;
                    (AnyModel::Flat(best), h)
                }
            })
        });
        let (model, history) = history.map_err(err)?;
        self.0.model = model;
        to_py(py, &history)
    }

    /// Metrics on one split, with optional bootstrap intervals.
    #[pyo3(signature = (dataset, split="test", bootstrap=0, seed=0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        split: &str,
        bootstrap: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        self.0.check_compatible(&dataset.0).map_err(err)?;
        let report = py
            .detach(|| hmil::evaluate(&self.0.model, &dataset.0, split, bootstrap, seed))
            .map_err(err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, d={})", self.0.model.kind(), self.0.model.input_width())
    }
}

/// Finite-difference check of every loss component on a small synthetic
/// batch. `config` overrides fields of the run configuration.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn gradcheck<'py>(py: Python<'py>, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: RunConfig = merge(&RunConfig::default(), config)?;
    let report = py.detach(|| gradcheck_report(&cfg)).map_err(err)?;
    let out = to_py(py, &report)?;
    out.set_item("passed", report.passed())?;
    Ok(out)
}

/// Weight on the alignment terms at `epoch` of `epochs`.
#[pyfunction]
fn schedule_beta(epoch: usize, epochs: usize) -> PyResult<f64> {
    hmil::losses::schedule_beta(epoch, epochs).map_err(err)
}

/// Macro one-vs-rest AUC with per-class values.
#[pyfunction]
fn auc_ovr(y_true: Vec<usize>, scores: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Option<f64>>)> {
    let r = hmil::auc_ovr(&y_true, &matrix(scores)?).map_err(err)?;
    Ok((r.macro_auc, r.per_class))
}

#[pymodule]
fn pyhmil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HmilException", m.py().get_type::<HmilException>())?;
    m.add_class::<PyTaxonomy>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_beta, m)?)?;
    m.add_function(wrap_pyfunction!(auc_ovr, m)?)?;
    Ok(())
}
