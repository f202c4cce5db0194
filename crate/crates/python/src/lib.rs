//! Python bindings: tensors, layer ops, losses, metrics, the segmentation
//! model, synthetic data and training.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use odseg_core::data::{self, Dataset, Sample};
use odseg_core::{layers, loss, metrics, train, weights};

fn err(e: odseg_core::Error) -> PyErr {
    match e {
        odseg_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense row-major float32 tensor.
#[pyclass(name = "Tensor", module = "odseg", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: odseg_core::Tensor,
}

fn wrap(t: odseg_core::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        odseg_core::Tensor::from_vec(&shape, data).map(wrap).map_err(err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        odseg_core::Tensor::zeros(&shape).map(wrap).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat list of values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.inner.clone().reshape(&shape).map(wrap).map_err(err)
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Same-padded 2-D cross-correlation; `kernel` is `[k, k, c_in, c_out]`.
#[pyfunction]
fn conv2d(input: &PyTensor, kernel: &PyTensor, bias: &PyTensor) -> PyResult<PyTensor> {
    let params = layers::ConvParams::new(kernel.inner.clone(), bias.inner.clone()).map_err(err)?;
    layers::conv2d_forward(&input.inner, &params)
        .map(|(out, _)| wrap(out))
        .map_err(err)
}

#[pyfunction]
fn maxpool2(input: &PyTensor) -> PyResult<PyTensor> {
    layers::maxpool2_forward(&input.inner)
        .map(|(out, _)| wrap(out))
        .map_err(err)
}

#[pyfunction]
fn upsample2(input: &PyTensor) -> PyResult<PyTensor> {
    layers::upsample2_forward(&input.inner).map(wrap).map_err(err)
}

#[pyfunction]
fn concat_channels(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    layers::concat_channels(&a.inner, &b.inner).map(wrap).map_err(err)
}

#[pyfunction]
fn relu(x: &PyTensor) -> PyTensor {
    wrap(layers::relu(&x.inner))
}

#[pyfunction]
fn sigmoid(x: &PyTensor) -> PyTensor {
    wrap(layers::sigmoid(&x.inner))
}

fn partition<'a>(labels: &'a PyTensor, predictions: &'a PyTensor) -> PyResult<loss::PixelPartition<'a>> {
    loss::PixelPartition::new(&labels.inner, &predictions.inner).map_err(err)
}

#[pyfunction]
fn bce_loss(labels: &PyTensor, predictions: &PyTensor) -> PyResult<f64> {
    Ok(loss::bce_loss(&partition(labels, predictions)?))
}

/// Soft Jaccard loss; raises `ValueError` when `labels` has no disc pixel.
#[pyfunction]
fn jaccard_loss(labels: &PyTensor, predictions: &PyTensor) -> PyResult<f64> {
    loss::jaccard_loss(&partition(labels, predictions)?).map_err(err)
}

#[pyfunction]
fn combined_loss(labels: &PyTensor, predictions: &PyTensor) -> PyResult<f64> {
    Ok(loss::combined_loss(&partition(labels, predictions)?))
}

/// Accuracy, Dice, sensitivity and IoU (fractions) plus confusion counts of
/// binary `prediction` against binary `truth`.
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, prediction: &PyTensor, truth: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
    let c = metrics::confusion(&prediction.inner, &truth.inner).map_err(err)?;
    let m = metrics::compute_metrics(&c);
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("dice", m.dice)?;
    d.set_item("sensitivity", m.sensitivity)?;
    d.set_item("iou", m.iou)?;
    d.set_item("tp", c.tp)?;
    d.set_item("fp", c.fp)?;
    d.set_item("tn", c.tn)?;
    d.set_item("fn", c.fn_)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (predictions, threshold = metrics::THRESHOLD))]
fn binarize(predictions: &PyTensor, threshold: f32) -> PyTensor {
    wrap(metrics::binarize(&predictions.inner, threshold))
}

/// `n` synthetic `(image [H, W, 3], mask [H, W, 1])` pairs.
#[pyfunction]
fn generate_synthetic(n: usize, size: usize, seed: u64) -> PyResult<Vec<(PyTensor, PyTensor)>> {
    let ds = data::generate_synthetic(n, size, seed).map_err(err)?;
    Ok(ds
        .samples
        .into_iter()
        .map(|s| (wrap(s.image), wrap(s.mask)))
        .collect())
}

fn dataset(pairs: Vec<(PyTensor, PyTensor)>) -> PyResult<Dataset> {
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (img, mask))| Sample::new(img.inner, mask.inner, format!("py-{i}")))
        .collect::<Result<Vec<_>, _>>()
        .map(Dataset::new)
        .map_err(err)
}

/// The encoder-decoder segmentation network.
#[pyclass(name = "Model", module = "odseg", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: odseg_core::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (height = 224, width = 224, width_multiplier = 1.0, seed = 0))]
    fn new(height: usize, width: usize, width_multiplier: f64, seed: u64) -> PyResult<Self> {
        let config = odseg_core::ModelConfig::new(height, width, width_multiplier).map_err(err)?;
        odseg_core::Model::build(config, seed)
            .map(|inner| PyModel { inner })
            .map_err(err)
    }

    /// Rebuilds a model from a training checkpoint and its `.meta` sidecar.
    #[staticmethod]
    fn load_checkpoint(path: PathBuf) -> PyResult<Self> {
        train::load_checkpoint(path)
            .map(|(inner, _)| PyModel { inner })
            .map_err(err)
    }

    /// Disc probabilities `[B, H, W, 1]` for a `[B, H, W, 3]` batch.
    fn predict(&self, batch: &PyTensor) -> PyResult<PyTensor> {
        self.inner.predict(&batch.inner).map(wrap).map_err(err)
    }

    fn parameter_count(&self) -> usize {
        self.inner.count_parameters()
    }

    fn parameter_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.parameter_report();
        let d = PyDict::new(py);
        d.set_item("encoder", r.encoder)?;
        d.set_item("center", r.center)?;
        d.set_item("decoder", r.decoder)?;
        d.set_item("head", r.head)?;
        d.set_item("total", r.total())?;
        Ok(d)
    }

    fn save_weights(&self, path: PathBuf) -> PyResult<()> {
        weights::save_weights(&self.inner, path).map_err(err)
    }

    /// Loads a weight file; returns the number of tensors loaded.
    #[pyo3(signature = (path, strict = true))]
    fn load_weights(&mut self, path: PathBuf, strict: bool) -> PyResult<usize> {
        weights::load_weights(&mut self.inner, path, strict)
            .map(|r| r.loaded.len())
            .map_err(err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Trains `model` on `(image, mask)` pairs and returns the best-validation
/// model with the per-epoch history.
#[pyfunction]
#[pyo3(signature = (model, train_pairs, val_pairs, max_epochs = 10, learning_rate = 1e-4, batch_size = 4, loss = "combined", seed = 0, out_dir = None))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    model: &PyModel,
    train_pairs: Vec<(PyTensor, PyTensor)>,
    val_pairs: Vec<(PyTensor, PyTensor)>,
    max_epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    loss: &str,
    seed: u64,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let config = train::TrainingConfig {
        max_epochs,
        learning_rate,
        batch_size,
        loss: loss.parse().map_err(err)?,
        seed,
        ..Default::default()
    };
    let (fit_set, val_set) = (dataset(train_pairs)?, dataset(val_pairs)?);
    let model = model.inner.clone();
    let outcome = py
        .detach(|| {
            let mut trainer = train::Trainer::new(&config);
            if let Some(dir) = &out_dir {
                trainer = trainer.out_dir(dir);
            }
            trainer.run(model, &fit_set, &val_set)
        })
        .map_err(err)?;
    let rows = outcome
        .history
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("val_loss", r.val_loss)?;
            d.set_item("lr", r.lr)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { inner: outcome.model }, rows))
}

#[pymodule]
fn odseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(maxpool2, m)?)?;
    m.add_function(wrap_pyfunction!(upsample2, m)?)?;
    m.add_function(wrap_pyfunction!(concat_channels, m)?)?;
    m.add_function(wrap_pyfunction!(relu, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
