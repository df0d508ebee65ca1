//! Python bindings: model building, scoring and training, corpus
//! generation, metrics, the cost model and gradient checks.
//!
//! Configuration objects cross the boundary as dicts (or JSON strings)
//! with the same keys as the CLI config file.

use std::path::PathBuf;

use padforge_core::cost::{flop_cost as cost_of, speedup_ratio as ratio_of, ConvShape, ConvVariant};
use padforge_core::data::{self, CorpusSpec, Manifest, SplitSpec};
use padforge_core::gradcheck::{run_suite, SuiteOptions};
use padforge_core::metrics::{self, MetricsReport};
use padforge_core::model::{self, ModelConfig, ModelParams, ScoreRecord};
use padforge_core::training::{self, TrainConfig};
use padforge_core::{seed, Error, Label, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Reads a dict, JSON string or None into `T`; None gives `fallback`.
fn from_py<T: DeserializeOwned>(obj: Option<&Bound<'_, PyAny>>, fallback: T) -> PyResult<T> {
    let Some(obj) = obj.filter(|o| !o.is_none()) else {
        return Ok(fallback);
    };
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Converts a serializable value into plain Python objects.
fn into_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn labels(values: &[String]) -> PyResult<Vec<Label>> {
    values.iter().map(|v| v.parse().map_err(to_py)).collect()
}

fn records(scores: &[f64], truth: &[String]) -> PyResult<Vec<ScoreRecord>> {
    let ids: Vec<String> = (0..scores.len()).map(|i| i.to_string()).collect();
    model::score_records(&ids, scores, &labels(truth)?).map_err(to_py)
}

/// A network plus its SVC head.
#[pyclass(module = "padforge")]
struct Model {
    params: ModelParams,
}

#[pymethods]
impl Model {
    /// `config` is a preset name ("toy", "tiny", "full"), a dict of model
    /// keys, or None for "toy".
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let cfg = match config.map(|c| c.extract::<String>()) {
            Some(Ok(name)) if name == "toy" => ModelConfig::toy(),
            Some(Ok(name)) if name == "tiny" => ModelConfig::tiny(),
            Some(Ok(name)) if name == "full" => ModelConfig::default(),
            _ => from_py(config, ModelConfig::toy())?,
        };
        cfg.validate().map_err(to_py)?;
        Ok(Model {
            params: model::build_model(&cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            params: model::load_checkpoint(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.params, path).map_err(to_py)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        into_py(py, self.params.config())
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.params.config().input_size
    }

    #[getter]
    fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.params().iter().map(|p| p.name.clone()).collect()
    }

    /// Eval-mode raw SVC scores for a batch of single-channel images given
    /// as `N × H × W` nested sequences (a NumPy array works).
    fn score(&self, py: Python<'_>, images: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        let batch = image_batch(&images)?;
        let params = &self.params;
        py.detach(|| model::predict_scores(params, &batch)).map_err(to_py)
    }

    /// Predicted labels ("live" or "spoof") for `images`.
    fn predict(&self, py: Python<'_>, images: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<String>> {
        self.score(py, images)?
            .into_iter()
            .map(|s| model::classify(s).map(|l| l.to_string()).map_err(to_py))
            .collect()
    }

    fn __repr__(&self) -> String {
        let c = self.params.config();
        format!(
            "Model(input_size={}, width_multiplier={}, trainable={})",
            c.input_size,
            c.width_multiplier,
            self.params.num_trainable()
        )
    }
}

fn image_batch(images: &[Vec<Vec<f64>>]) -> PyResult<Tensor> {
    let h = images.first().map_or(0, Vec::len);
    let w = images.first().and_then(|i| i.first()).map_or(0, Vec::len);
    if images.iter().any(|i| i.len() != h || i.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("images must share one H × W shape"));
    }
    let flat: Vec<f64> = images.iter().flatten().flatten().copied().collect();
    Tensor::from_vec([images.len(), 1, h, w], flat).map_err(to_py)
}

/// Writes a synthetic corpus (images plus manifest.tsv) to `out` and
/// returns the number of samples.
#[pyfunction]
#[pyo3(signature = (out, corpus=None, seed=0, workers=1))]
fn generate_corpus(
    py: Python<'_>,
    out: PathBuf,
    corpus: Option<&Bound<'_, PyAny>>,
    seed: u64,
    workers: usize,
) -> PyResult<usize> {
    let spec: CorpusSpec = from_py(corpus, CorpusSpec::default())?;
    spec.validate().map_err(to_py)?;
    py.detach(|| data::generate_corpus(&spec, seed, &out, workers.max(1)))
        .map(|m| m.len())
        .map_err(to_py)
}

/// Reads one PGM image as an `H × W` list of rows in [0, 1].
#[pyfunction]
fn read_image(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    let img = data::read_image(path).map_err(to_py)?;
    Ok(img.data().chunks(img.width()).map(<[f64]>::to_vec).collect())
}

fn read_manifest(path: PathBuf) -> PyResult<Manifest> {
    let file = if path.is_dir() { path.join("manifest.tsv") } else { path };
    Manifest::read(file).map_err(to_py)
}

/// Splits a corpus by protocol and trains `model` on the train side.
/// Returns the trained model and one dict per epoch; validation ACE is
/// measured on the test side.
#[pyfunction]
#[pyo3(signature = (model, data, split=None, train=None, seed=0, workers=1))]
fn train<'py>(
    py: Python<'py>,
    model: &Model,
    data: PathBuf,
    split: Option<&Bound<'py, PyAny>>,
    train: Option<&Bound<'py, PyAny>>,
    seed: u64,
    workers: usize,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let split: SplitSpec = from_py(split, SplitSpec::default())?;
    let config: TrainConfig = from_py(train, TrainConfig::default())?;
    let manifest = read_manifest(data)?;
    let params = model.params.clone();
    let workers = workers.max(1);
    let (params, log) = py
        .detach(|| {
            let (a, b) = data::build_split(&manifest, &split, seed::derive(seed, "split"))?;
            let (a, b) = (data::load_samples(&a, workers)?, data::load_samples(&b, workers)?);
            training::train(params, &a, &b, &config, seed::derive(seed, "train"), workers)
        })
        .map_err(to_py)?;
    Ok((Model { params }, into_py(py, &log.epochs)?))
}

/// APCER, BPCER, ACE and accuracy (percent) for raw scores under the rule
/// "live iff score > 0".
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, scores: Vec<f64>, truth: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    into_py(
        py,
        &metrics::compute_metrics(&records(&scores, &truth)?).map_err(to_py)?,
    )
}

/// ACE and accuracy from given error rates (percent).
#[pyfunction]
fn metrics_from_rates<'py>(py: Python<'py>, apcer: f64, bpcer: f64) -> PyResult<Bound<'py, PyAny>> {
    into_py(py, &MetricsReport::from_rates(apcer, bpcer))
}

/// DET curve over normalized scores as (threshold, apcer, bpcer) tuples.
#[pyfunction]
#[pyo3(signature = (scores, truth, n_thresholds=101))]
fn det_curve(scores: Vec<f64>, truth: Vec<String>, n_thresholds: usize) -> PyResult<Vec<(f64, f64, f64)>> {
    let curve = metrics::det_curve(&records(&scores, &truth)?, n_thresholds).map_err(to_py)?;
    Ok(curve.iter().map(|p| (p.threshold, p.apcer, p.bpcer)).collect())
}

/// Lowest BPCER at APCER ≤ `apcer_target`, or None when unattainable.
#[pyfunction]
#[pyo3(signature = (scores, truth, apcer_target=1.0, n_thresholds=101))]
fn bpcer_at_apcer(
    scores: Vec<f64>,
    truth: Vec<String>,
    apcer_target: f64,
    n_thresholds: usize,
) -> PyResult<Option<f64>> {
    let curve = metrics::det_curve(&records(&scores, &truth)?, n_thresholds).map_err(to_py)?;
    let r = metrics::bpcer_at_apcer(&curve, apcer_target);
    Ok(r.attainable.then_some(r.bpcer))
}

#[pyfunction]
fn normalize_scores(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    model::normalize_scores(&scores).map_err(to_py)
}

#[pyfunction]
fn classify(score: f64) -> PyResult<String> {
    model::classify(score).map(|l| l.to_string()).map_err(to_py)
}

/// Hinge loss `C·Σ max(0, 1 − y·s)` and its gradient; labels are ±1.
#[pyfunction]
#[pyo3(signature = (scores, labels, c=1.0))]
fn hinge_loss(scores: Vec<f64>, labels: Vec<f64>, c: f64) -> PyResult<(f64, Vec<f64>)> {
    model::hinge_loss(&scores, &labels, c).map_err(to_py)
}

fn shape(kernel: u64, in_channels: u64, out_channels: u64, spatial: u64) -> PyResult<ConvShape> {
    ConvShape::new(kernel, in_channels, out_channels, spatial).map_err(to_py)
}

/// Multiply-accumulate count of a stride-1 "same" convolution;
/// `variant` is "standard" or "depthwise_separable".
#[pyfunction]
#[pyo3(signature = (kernel, in_channels, out_channels, spatial, variant="standard"))]
fn flop_cost(kernel: u64, in_channels: u64, out_channels: u64, spatial: u64, variant: &str) -> PyResult<u64> {
    let v = match variant {
        "standard" => ConvVariant::Standard,
        "depthwise_separable" => ConvVariant::DepthwiseSeparable,
        other => return Err(PyValueError::new_err(format!("unknown variant {other:?}"))),
    };
    Ok(cost_of(shape(kernel, in_channels, out_channels, spatial)?, v).mult_adds)
}

/// Standard cost over depthwise-separable cost.
#[pyfunction]
fn speedup_ratio(kernel: u64, in_channels: u64, out_channels: u64, spatial: u64) -> PyResult<f64> {
    Ok(ratio_of(shape(kernel, in_channels, out_channels, spatial)?))
}

/// Finite-difference check of every layer and the end-to-end loss on the
/// tiny model; one dict per check.
#[pyfunction]
#[pyo3(signature = (seed=0, tolerance=1e-4))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, tolerance: f64) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let options = SuiteOptions {
        seed,
        ..SuiteOptions::default()
    };
    let checks = py.detach(|| run_suite(&options)).map_err(to_py)?;
    checks
        .iter()
        .map(|c| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("layer", c.layer.name())?;
            d.set_item("max_rel_error", c.max_rel_error())?;
            d.set_item("checked", c.checked())?;
            d.set_item("kinks_skipped", c.kinks_skipped())?;
            d.set_item("passed", c.passed(tolerance))?;
            Ok(d.into_any())
        })
        .collect()
}

#[pymodule]
fn padforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(read_image, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_from_rates, m)?)?;
    m.add_function(wrap_pyfunction!(det_curve, m)?)?;
    m.add_function(wrap_pyfunction!(bpcer_at_apcer, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_scores, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(hinge_loss, m)?)?;
    m.add_function(wrap_pyfunction!(flop_cost, m)?)?;
    m.add_function(wrap_pyfunction!(speedup_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
