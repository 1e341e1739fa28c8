//! Python bindings for `disco_core`.
//!
//! Build with `cargo build --release -p disco-python` and copy
//! `target/release/libdisco.so` to `disco.so` somewhere on `sys.path`.

use std::collections::HashMap;

use indexmap::IndexMap;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use disco_core::checkpoint::Checkpoint;
use disco_core::corpus::{AnnotationDataset, LabelSpace, LoadOptions};
use disco_core::diagnostics::{run_diagnostics, DiagnosticsConfig};
use disco_core::features::{self, FeatureMatrix, FeatureSource};
use disco_core::metrics::{self, PerspectivistMetric, SoftMetric, TaskConfig};
use disco_core::model::{forward, Activation, DiscoConfig};
use disco_core::predict::{predict_tasks, Aggregation, PredictionSet, Predictor};
use disco_core::synthgen::{self, GeneratorSpec, SyntheticCorpus};
use disco_core::trainer::{FeaturePair, TrainConfig, Trainer};
use disco_core::DiscoError;

fn py_err(e: DiscoError) -> PyErr {
    match e {
        DiscoError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for disco_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn json_loads<'py>(py: Python<'py>, s: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (s,))
}

/// An annotated corpus: items, annotators, labels and split assignments.
#[pyclass(frozen, skip_from_py_object, module = "disco")]
#[derive(Clone)]
struct Dataset {
    inner: AnnotationDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = disco_core::load_dataset(path, &LoadOptions::default()).py()?;
        Ok(Dataset { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = AnnotationDataset::from_json_str(text, &LoadOptions::default()).py()?;
        Ok(Dataset { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_string().py()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    /// Items of one split (`train`, `dev` or `test`); annotator indices are kept.
    fn split(&self, name: &str) -> PyResult<Self> {
        Ok(Dataset {
            inner: self.inner.split_view_named(name).py()?,
        })
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn num_annotators(&self) -> usize {
        self.inner.num_annotators()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_records(&self) -> usize {
        self.inner.records().len()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.label_space().labels().to_vec()
    }

    #[getter]
    fn label_values(&self) -> Vec<f64> {
        self.inner.label_space().values().to_vec()
    }

    #[getter]
    fn ordinal(&self) -> bool {
        self.inner.label_space().is_ordinal()
    }

    #[getter]
    fn item_ids(&self) -> Vec<String> {
        self.inner
            .items()
            .iter()
            .map(|i| i.item_id.clone())
            .collect()
    }

    #[getter]
    fn annotator_ids(&self) -> Vec<String> {
        self.inner
            .annotators()
            .iter()
            .map(|a| a.annotator_id.clone())
            .collect()
    }

    /// `(item_id, annotator_id, label)` for every observed annotation.
    fn records(&self) -> Vec<(String, String, String)> {
        let ds = &self.inner;
        ds.records()
            .iter()
            .map(|r| {
                (
                    ds.items()[r.item].item_id.clone(),
                    ds.annotators()[r.annotator].annotator_id.clone(),
                    ds.label_space().label(r.label).to_string(),
                )
            })
            .collect()
    }

    /// Empirical label distribution per item; unannotated items are omitted.
    fn item_distributions(&self) -> IndexMap<String, Vec<f64>> {
        metrics::gold_soft_labels(&self.inner)
    }

    fn annotator_distributions(&self) -> IndexMap<String, Vec<f64>> {
        self.inner
            .annotators()
            .iter()
            .zip(self.inner.annotator_histograms())
            .filter(|(_, h)| h.is_valid())
            .map(|(a, h)| (a.annotator_id.clone(), h.probs))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.num_items()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(items={}, annotators={}, classes={}, records={})",
            self.inner.num_items(),
            self.inner.num_annotators(),
            self.inner.num_classes(),
            self.inner.records().len()
        )
    }
}

/// One feature vector per item or annotator id.
#[pyclass(frozen, skip_from_py_object, module = "disco")]
#[derive(Clone)]
struct Features {
    inner: FeatureMatrix,
}

#[pymethods]
impl Features {
    #[new]
    fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let inner = FeatureMatrix::new(dim, ids, rows, FeatureSource::EmbeddingFile).py()?;
        Ok(Features { inner })
    }

    /// Read a TSV of `id<TAB>v1<TAB>v2...` lines, reordered to `ids`.
    #[staticmethod]
    fn load(path: &str, ids: Vec<String>) -> PyResult<Self> {
        Ok(Features {
            inner: features::load_embeddings(path, &ids).py()?,
        })
    }

    /// Signed hashed bag of words over each item's text fields.
    #[staticmethod]
    #[pyo3(signature = (dataset, dim = 1024, field_weights = None))]
    fn hashed(
        dataset: &Dataset,
        dim: usize,
        field_weights: Option<HashMap<String, f64>>,
    ) -> PyResult<Self> {
        let weights = field_weights.unwrap_or_default();
        Ok(Features {
            inner: features::hashed_bow(dataset.inner.items(), dim, &weights).py()?,
        })
    }

    /// Identity vectors for the dataset's annotators.
    #[staticmethod]
    fn one_hot(dataset: &Dataset) -> PyResult<Self> {
        let ds = &dataset.inner;
        let ids = ds
            .annotators()
            .iter()
            .map(|a| a.annotator_id.clone())
            .collect();
        let inner = features::one_hot_annotators(ds.num_annotators())
            .and_then(|m| m.with_ids(ids))
            .py()?;
        Ok(Features { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_tsv(path).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    #[getter]
    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Features(rows={}, dim={})",
            self.inner.len(),
            self.inner.dim()
        )
    }
}

impl Features {
    fn aligned(&self, ids: Vec<String>) -> PyResult<FeatureMatrix> {
        self.inner.select(&ids).py()
    }
}

fn feature_pair(
    ds: &AnnotationDataset,
    items: &Features,
    annots: &Features,
) -> PyResult<FeaturePair> {
    Ok(FeaturePair {
        items: items.aligned(ds.items().iter().map(|i| i.item_id.clone()).collect())?,
        annotators: annots.aligned(
            ds.annotators()
                .iter()
                .map(|a| a.annotator_id.clone())
                .collect(),
        )?,
    })
}

/// A generated corpus with its known soft labels.
#[pyclass(frozen, module = "disco")]
struct Corpus {
    inner: SyntheticCorpus,
}

#[pymethods]
impl Corpus {
    #[getter]
    fn dataset(&self) -> Dataset {
        Dataset {
            inner: self.inner.dataset.clone(),
        }
    }

    #[getter]
    fn item_features(&self) -> Features {
        Features {
            inner: self.inner.item_features.clone(),
        }
    }

    #[getter]
    fn annotator_features(&self) -> Features {
        Features {
            inner: self.inner.annotator_features.clone(),
        }
    }

    /// Population label distribution of every item.
    #[getter]
    fn posteriors(&self) -> IndexMap<String, Vec<f64>> {
        self.inner.posteriors.clone()
    }

    #[getter]
    fn true_classes(&self) -> Vec<usize> {
        self.inner.true_classes.clone()
    }

    /// Write dataset.json, item_feats.tsv, annot_feats.tsv and posteriors.json.
    fn write(&self, dir: &str) -> PyResult<()> {
        self.inner.write_to_dir(dir).py()
    }
}

/// Generate a synthetic corpus from a JSON generator spec.
#[pyfunction]
fn generate(spec_json: &str) -> PyResult<Corpus> {
    let spec = GeneratorSpec::from_json_str(spec_json).py()?;
    Ok(Corpus {
        inner: synthgen::generate(&spec).py()?,
    })
}

/// Soft labels per item and one label per requested (item, annotator) pair.
#[pyclass(frozen, skip_from_py_object, module = "disco")]
#[derive(Clone)]
struct Predictions {
    inner: PredictionSet,
}

#[pymethods]
impl Predictions {
    #[staticmethod]
    fn load(path: &str, dataset: &Dataset) -> PyResult<Self> {
        Ok(Predictions {
            inner: PredictionSet::load(path, dataset.inner.label_space()).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_string().py()
    }

    #[getter]
    fn soft(&self) -> IndexMap<String, Vec<f64>> {
        self.inner.soft.clone()
    }

    /// item id → annotator id → label name
    #[getter]
    fn labels(&self) -> IndexMap<String, IndexMap<String, String>> {
        let ls = &self.inner.label_space;
        self.inner
            .perspectivist
            .iter()
            .map(|(item, row)| {
                let row = row
                    .iter()
                    .map(|(a, &k)| (a.clone(), ls.label(k).to_string()))
                    .collect();
                (item.clone(), row)
            })
            .collect()
    }

    #[getter]
    fn aggregation(&self) -> &'static str {
        self.inner.aggregation.as_str()
    }

    /// Pairs whose annotator had no training data.
    #[getter]
    fn fallback_pairs(&self) -> usize {
        self.inner.fallback_pairs
    }

    fn __repr__(&self) -> String {
        format!(
            "Predictions(items={}, pairs={}, aggregation={})",
            self.inner.soft.len(),
            self.inner.num_pairs(),
            self.inner.aggregation.as_str()
        )
    }
}

fn parse_activation(name: &str) -> PyResult<Activation> {
    match name {
        "softsign" => Ok(Activation::Softsign),
        "relu" => Ok(Activation::Relu),
        "elu" => Ok(Activation::Elu),
        _ => Err(PyValueError::new_err(format!(
            "unknown activation `{name}` (expected softsign, relu or elu)"
        ))),
    }
}

fn parse_aggregation(name: &str) -> PyResult<Aggregation> {
    match name {
        "expectation" => Ok(Aggregation::Expectation),
        "majority" | "majority_vote" => Ok(Aggregation::MajorityVote),
        _ => Err(PyValueError::new_err(format!(
            "unknown aggregation `{name}` (expected expectation or majority)"
        ))),
    }
}

fn epoch_rows<'py>(py: Python<'py>, t: &Trainer<'_>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    t.report()
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("loss", e.loss)?;
            d.set_item("objective", e.objective.as_str())?;
            d.set_item("dev_soft", e.dev_soft)?;
            d.set_item("dev_pe", e.dev_pe)?;
            d.set_item("seconds", e.seconds)?;
            Ok(d)
        })
        .collect()
}

/// Trained weights plus the configuration that shaped them.
#[pyclass(frozen, module = "disco")]
struct Model {
    ckpt: Checkpoint,
}

#[pymethods]
impl Model {
    /// Train on the dataset's train split and return `(model, epochs)`.
    ///
    /// `train_config` is a JSON object with the training options (epochs,
    /// batch_size, lr, loss, shuffle_seed, eval_every, ...).
    #[staticmethod]
    #[pyo3(signature = (
        dataset, item_features, annotator_features, train_config = None, *,
        item_latent_dim = 128, annot_latent_dim = 64, hidden_dim = None,
        activation = "softsign", init_scale = None, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        dataset: &Dataset,
        item_features: &Features,
        annotator_features: &Features,
        train_config: Option<&str>,
        item_latent_dim: usize,
        annot_latent_dim: usize,
        hidden_dim: Option<usize>,
        activation: &str,
        init_scale: Option<f64>,
        seed: u64,
    ) -> PyResult<(Model, Vec<Bound<'py, PyDict>>)> {
        let ds = &dataset.inner;
        let feats = feature_pair(ds, item_features, annotator_features)?;
        let tc: TrainConfig = match train_config {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainConfig::default(),
        };
        let mut cfg = DiscoConfig::new(
            feats.items.dim(),
            feats.annotators.dim(),
            item_latent_dim,
            annot_latent_dim,
            ds.num_classes(),
        );
        cfg.hidden_dim = hidden_dim;
        cfg.activation = parse_activation(activation)?;
        cfg.init_scale = init_scale;
        cfg.seed = seed;
        let mut trainer = Trainer::new(ds, &feats, cfg, tc).py()?;
        py.detach(|| trainer.run()).py()?;
        let rows = epoch_rows(py, &trainer)?;
        Ok((
            Model {
                ckpt: trainer.checkpoint(),
            },
            rows,
        ))
    }

    /// Continue a saved training run up to `epochs` total epochs.
    #[staticmethod]
    #[pyo3(signature = (path, dataset, item_features, annotator_features, train_config = None, epochs = None))]
    fn resume<'py>(
        py: Python<'py>,
        path: &str,
        dataset: &Dataset,
        item_features: &Features,
        annotator_features: &Features,
        train_config: Option<&str>,
        epochs: Option<usize>,
    ) -> PyResult<(Model, Vec<Bound<'py, PyDict>>)> {
        let ds = &dataset.inner;
        let feats = feature_pair(ds, item_features, annotator_features)?;
        let mut tc: TrainConfig = match train_config {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainConfig::default(),
        };
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        let ckpt = Checkpoint::load(path).py()?;
        let mut trainer = Trainer::from_checkpoint(ckpt, ds, &feats, tc).py()?;
        py.detach(|| trainer.run()).py()?;
        let rows = epoch_rows(py, &trainer)?;
        Ok((
            Model {
                ckpt: trainer.checkpoint(),
            },
            rows,
        ))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            ckpt: Checkpoint::load(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ckpt.save(path).py()
    }

    /// Model configuration as a dict.
    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = serde_json::to_string(&self.ckpt.config)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_loads(py, &s)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.ckpt.params.num_parameters()
    }

    /// The three head distributions `(y, y_item, y_annotator)` for one pair of inputs.
    fn forward(&self, x: Vec<f64>, a: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let t = forward(&self.ckpt.params, &self.ckpt.config, &x, &a).py()?;
        Ok((t.z_y, t.z_yi, t.z_ya))
    }

    /// Predict soft labels for the items of `split` (or `all`) and labels for
    /// their requested annotators.
    #[pyo3(signature = (dataset, item_features, annotator_features, split = "test", aggregation = "expectation"))]
    fn predict(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        item_features: &Features,
        annotator_features: &Features,
        split: &str,
        aggregation: &str,
    ) -> PyResult<Predictions> {
        let ds = &dataset.inner;
        let agg = parse_aggregation(aggregation)?;
        let feats = feature_pair(ds, item_features, annotator_features)?;
        let view = if split == "all" {
            ds.clone()
        } else {
            ds.split_view_named(split).py()?
        };
        let (params, config) = (&self.ckpt.params, &self.ckpt.config);
        let inner = py
            .detach(|| {
                let predictor = Predictor::new(params, config, &feats.annotators, ds);
                predict_tasks(&view, &feats.items, &predictor, agg)
            })
            .py()?;
        Ok(Predictions { inner })
    }
}

fn task_config(
    ls: &LabelSpace,
    task_a: Option<&str>,
    task_b: Option<&str>,
    normalized: bool,
) -> PyResult<TaskConfig> {
    let base = TaskConfig::for_label_space(ls);
    let task_a = match task_a {
        None => base.task_a,
        Some("manhattan") => SoftMetric::Manhattan,
        Some("wasserstein") => SoftMetric::Wasserstein,
        Some(other) => {
            return Err(PyValueError::new_err(format!(
                "unknown soft metric `{other}`"
            )))
        }
    };
    let task_b = match task_b {
        None => base.task_b,
        Some("error_rate") => PerspectivistMetric::ErrorRate,
        Some("abs_distance") => PerspectivistMetric::AbsDistance,
        Some(other) => {
            return Err(PyValueError::new_err(format!(
                "unknown per-annotator metric `{other}`"
            )))
        }
    };
    Ok(TaskConfig {
        task_a,
        task_b,
        normalized,
    })
}

/// Score predictions against the gold annotations of `dataset`; returns a
/// dict with `task_a` and `task_b` sections.
#[pyfunction]
#[pyo3(signature = (predictions, dataset, task_a = None, task_b = None, normalized = true))]
fn evaluate<'py>(
    py: Python<'py>,
    predictions: &Predictions,
    dataset: &Dataset,
    task_a: Option<&str>,
    task_b: Option<&str>,
    normalized: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let tc = task_config(dataset.inner.label_space(), task_a, task_b, normalized)?;
    let report = metrics::evaluate(&predictions.inner, &dataset.inner, &tc).py()?;
    json_loads(py, &report.to_json_string().py()?)
}

/// Write the diagnostic CSV tables for `predictions` on `dataset` into
/// `out_dir`; returns the file names written.
#[pyfunction]
#[pyo3(signature = (predictions, dataset, out_dir, bins = 10, quantile = 0.25))]
fn diagnose(
    predictions: &Predictions,
    dataset: &Dataset,
    out_dir: &str,
    bins: usize,
    quantile: f64,
) -> PyResult<Vec<&'static str>> {
    let mut cfg = DiagnosticsConfig::for_label_space(dataset.inner.label_space());
    cfg.calibration_bins = bins;
    cfg.nad_bins = bins;
    cfg.quantile = quantile;
    let diag = run_diagnostics(&predictions.inner, &dataset.inner, &cfg).py()?;
    diag.write_csvs(out_dir).py()
}

/// The most frequent training label predicted everywhere in `eval`.
#[pyfunction]
fn most_frequent_baseline(train: &Dataset, eval: &Dataset) -> PyResult<Predictions> {
    Ok(Predictions {
        inner: metrics::baseline_most_frequent(&train.inner, &eval.inner).py()?,
    })
}

/// Uniform soft labels and seeded uniform per-annotator labels.
#[pyfunction]
#[pyo3(signature = (eval, seed = 0))]
fn random_baseline(eval: &Dataset, seed: u64) -> Predictions {
    Predictions {
        inner: metrics::baseline_random(&eval.inner, seed),
    }
}

#[pyfunction]
fn manhattan(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    metrics::manhattan(&p, &q).py()
}

/// Wasserstein-1 distance between two distributions on the increasing points `values`.
#[pyfunction]
fn wasserstein(p: Vec<f64>, q: Vec<f64>, values: Vec<f64>) -> PyResult<f64> {
    let labels = values.iter().map(|v| v.to_string()).collect();
    let ls = LabelSpace::new(labels, values, true).py()?;
    metrics::wasserstein_metric(&p, &q, &ls).py()
}

/// Disagreement-aware label distribution models.
#[pymodule]
fn disco(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Features>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Predictions>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(most_frequent_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(random_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(manhattan, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    Ok(())
}
