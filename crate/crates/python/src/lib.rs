//! Python module `mfennet`: models, training, prediction, complexity counts,
//! synthetic data, metrics and gradient checks.
//!
//! Tensors cross the boundary as flat row-major float lists plus an
//! `(n, c, h, w)` shape tuple.

use std::path::PathBuf;

use mfennet::check::{run_suites, SuiteConfig};
use mfennet::complexity::{report, Convention, REFERENCE_MFENNET, REFERENCE_UNET};
use mfennet::config::{arch_from_text, arch_to_text};
use mfennet::data::{load_dataset, synth_dataset, AugmentConfig, Dataset};
use mfennet::engine::{Shape4, Tensor4};
use mfennet::model::{Arch, Model, ModelGraph};
use mfennet::train::{self, load_checkpoint, save_checkpoint, TrainConfig, DEFAULT_THRESHOLD};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Dims = (usize, usize, usize, usize);

fn err(e: mfennet::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(data: Vec<f32>, (n, c, h, w): Dims) -> PyResult<Tensor4<f32>> {
    Tensor4::from_vec(Shape4::new(n, c, h, w), data).map_err(err)
}

fn dims(t: &Tensor4<f32>) -> Dims {
    let s = t.shape();
    (s.n, s.c, s.h, s.w)
}

fn arch_of(name: &str, config: Option<&str>) -> PyResult<Arch> {
    let mut text = format!("model.arch = {name}\n");
    text.push_str(config.unwrap_or(""));
    arch_from_text(&text).map_err(err)
}

/// A segmentation network with its parameters.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// `config` holds extra `model.key = value` lines.
    #[new]
    #[pyo3(signature = (arch = "mfennet", seed = 0, config = None))]
    fn new(arch: &str, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let graph = ModelGraph::build(&arch_of(arch, config)?).map_err(err)?;
        Ok(PyModel {
            inner: Model::new(graph, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params().numel()
    }

    fn config(&self) -> String {
        arch_to_text(self.inner.graph().arch())
    }

    fn manifest(&self) -> String {
        self.inner.params().manifest()
    }

    /// Logits for a batch; returns `(flat, shape)`.
    fn predict(&self, images: Vec<f32>, shape: Dims) -> PyResult<(Vec<f32>, Dims)> {
        let y = self.inner.predict(&tensor(images, shape)?).map_err(err)?;
        let d = dims(&y);
        Ok((y.into_vec(), d))
    }

    /// Train in place on a dataset directory (or synthetic data when
    /// `data` is `None`) and return one dict per epoch.
    #[pyo3(signature = (data = None, size = 64, synth_n = 16, synth_seed = 7, epochs = 1, lr = 1e-4, batch_size = 16, seed = 0, augment = false))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        data: Option<PathBuf>,
        size: usize,
        synth_n: usize,
        synth_seed: u64,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        augment: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let ds = dataset(data, size, synth_n, synth_seed)?;
        let cfg = TrainConfig {
            epochs,
            lr,
            batch_size,
            seed,
            augment,
            ..TrainConfig::default()
        };
        let (model, history) = train::train(self.inner.clone(), &ds, &ds, &cfg, &AugmentConfig::default()).map_err(err)?;
        self.inner = model;
        history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("loss", r.loss)?;
                d.set_item("iou", r.iou)?;
                d.set_item("dice", r.dice)?;
                Ok(d)
            })
            .collect()
    }

    /// Mean per-image `(iou, dice)` over a dataset.
    #[pyo3(signature = (data = None, size = 64, synth_n = 16, synth_seed = 7, threshold = DEFAULT_THRESHOLD))]
    fn evaluate(&self, data: Option<PathBuf>, size: usize, synth_n: usize, synth_seed: u64, threshold: f64) -> PyResult<(f64, f64)> {
        let ds = dataset(data, size, synth_n, synth_seed)?;
        train::evaluate(&self.inner, &ds, threshold).map_err(err)
    }
}

fn dataset(data: Option<PathBuf>, size: usize, synth_n: usize, synth_seed: u64) -> PyResult<Dataset> {
    match data {
        Some(dir) => load_dataset(&dir, size),
        None => synth_dataset(synth_n, size, synth_seed),
    }
    .map_err(err)
}

/// Parameter and FLOP totals with the relative delta to the published
/// figures (the delta is only reported for 256x256 inputs).
#[pyfunction]
#[pyo3(signature = (arch = "mfennet", input = 256, convention = "mac-as-one", config = None))]
fn count<'py>(py: Python<'py>, arch: &str, input: usize, convention: &str, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let arch = arch_of(arch, config)?;
    let graph = ModelGraph::build(&arch).map_err(err)?;
    let conv = Convention::parse(convention).map_err(err)?;
    let r = report(&graph, Shape4::new(1, arch.in_channels(), input, input), conv).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("params", r.total_params)?;
    d.set_item("flops", r.total_flops)?;
    d.set_item("convention", conv.name())?;
    if input == 256 {
        let reference = match arch {
            Arch::MfenNet(_) => &REFERENCE_MFENNET,
            Arch::UNet(_) => &REFERENCE_UNET,
        };
        let (dp, df) = r.delta(reference);
        d.set_item("params_delta", dp)?;
        d.set_item("flops_delta", df)?;
    }
    Ok(d)
}

/// Synthetic ellipse images and masks: `(images, masks, image_shape)`.
#[pyfunction]
#[pyo3(signature = (n = 16, size = 64, seed = 7))]
fn synth(n: usize, size: usize, seed: u64) -> PyResult<(Vec<f32>, Vec<f32>, Dims)> {
    let ds = synth_dataset(n, size, seed).map_err(err)?;
    let (mut images, mut masks) = (Vec::new(), Vec::new());
    for s in ds.samples() {
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    Ok((images, masks, (n, 3, size, size)))
}

#[pyfunction]
#[pyo3(signature = (logits, masks, shape, threshold = DEFAULT_THRESHOLD))]
fn iou(logits: Vec<f32>, masks: Vec<f32>, shape: Dims, threshold: f64) -> PyResult<f64> {
    train::iou(&tensor(logits, shape)?, &tensor(masks, shape)?, threshold).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (logits, masks, shape, threshold = DEFAULT_THRESHOLD))]
fn dice(logits: Vec<f32>, masks: Vec<f32>, shape: Dims, threshold: f64) -> PyResult<f64> {
    train::dice(&tensor(logits, shape)?, &tensor(masks, shape)?, threshold).map_err(err)
}

/// Finite-difference check of every op and the full network:
/// `[(name, max_rel_error, passed)]`.
#[pyfunction]
#[pyo3(signature = (size = 16, seed = 0))]
fn gradcheck(size: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = SuiteConfig {
        size,
        seed,
        ..SuiteConfig::default()
    };
    let results = run_suites(&cfg).map_err(err)?;
    Ok(results.iter().map(|r| (r.name.clone(), r.max_rel_error(), r.passed())).collect())
}

#[pymodule]
#[pyo3(name = "mfennet")]
fn mfennet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(count, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
