//! Python bindings: images, procedural data, metrics, schedules, and the
//! trainer / generator loaded from checkpoints.

use std::path::PathBuf;

use fdnn_core::data::{self, default_seen_styles, default_unseen_styles, StyleSpec};
use fdnn_core::metrics;
use fdnn_core::model::{self, Destylize, EpochStats, TrainConfig};
use fdnn_core::optim;
use fdnn_core::{FdnnError, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: FdnnError) -> PyErr {
    match e {
        FdnnError::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        FdnnError::Io { .. } | FdnnError::Ppm { .. } | FdnnError::Checkpoint { .. } => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// RGB image with channel-major values in [0, 1].
#[pyclass(name = "Image", module = "fdnn", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: data::Image,
}

#[pymethods]
impl PyImage {
    /// `values` holds 3·height·width floats in channel, row, column order.
    #[new]
    fn new(height: usize, width: usize, values: Vec<f64>) -> PyResult<Self> {
        let t = Tensor::new(vec![3, height, width], values).map_err(err)?;
        Ok(PyImage {
            inner: data::Image::new(t).map_err(err)?,
        })
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        PyImage {
            inner: data::Image::filled(height, width, rgb),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyImage {
            inner: data::load_ppm(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_ppm(&self.inner, path).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.tensor().data().to_vec()
    }

    fn pixel(&self, y: usize, x: usize) -> PyResult<[f64; 3]> {
        if y >= self.inner.height() || x >= self.inner.width() {
            return Err(PyValueError::new_err(format!("pixel ({y}, {x}) out of range")));
        }
        Ok(self.inner.pixel(y, x))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

fn all_styles() -> Vec<StyleSpec> {
    default_seen_styles()
        .into_iter()
        .chain(default_unseen_styles())
        .collect()
}

/// Names of the built-in styles, seen ones first.
#[pyfunction]
fn styles() -> Vec<(String, bool)> {
    all_styles()
        .into_iter()
        .map(|s| (s.name, s.split == data::StyleSplit::Seen))
        .collect()
}

#[pyfunction]
fn gen_face(id_seed: u64, size: usize) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: data::gen_face(id_seed, size).map_err(err)?,
    })
}

#[pyfunction]
fn stylize(image: &PyImage, style: &str) -> PyResult<PyImage> {
    let spec = all_styles()
        .into_iter()
        .find(|s| s.name == style)
        .ok_or_else(|| PyValueError::new_err(format!("unknown style {style:?}")))?;
    Ok(PyImage {
        inner: data::stylize(&image.inner, &spec).map_err(err)?,
    })
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn chance_top_k(n: usize, m: usize, k: usize) -> f64 {
    metrics::chance_top_k(n, m, k)
}

#[pyfunction]
fn lambda_at(epoch: u32) -> f64 {
    optim::lambda_at(epoch)
}

#[pyfunction]
fn alpha_at(epoch: u32) -> f64 {
    optim::alpha_at(epoch)
}

/// Trained style removal network.
#[pyclass(name = "Generator", module = "fdnn")]
pub struct PyGenerator {
    inner: model::Generator,
}

#[pymethods]
impl PyGenerator {
    /// Untrained generator with the given seed.
    #[new]
    #[pyo3(signature = (image_size=32, base_channels=32, seed=0))]
    fn new(image_size: usize, base_channels: usize, seed: u64) -> PyResult<Self> {
        Ok(PyGenerator {
            inner: model::build_generator(image_size, base_channels, seed).map_err(err)?,
        })
    }

    /// Generator stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGenerator {
            inner: model::load_checkpoint(path).map_err(err)?.generator,
        })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    fn destylize(&self, image: &PyImage) -> PyResult<PyImage> {
        Ok(PyImage {
            inner: self.inner.destylize(&image.inner).map_err(err)?,
        })
    }

    fn embed(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        metrics::embed(&self.inner, &image.inner).map_err(err)
    }
}

fn stats_dict<'py>(py: Python<'py>, e: &EpochStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", e.epoch)?;
    d.set_item("pixel_loss", e.pixel_loss)?;
    d.set_item("d_loss", e.d_loss)?;
    d.set_item("g_adv_loss", e.g_adv_loss)?;
    d.set_item("d_real_acc", e.d_real_acc)?;
    d.set_item("d_fake_acc", e.d_fake_acc)?;
    d.set_item("lambda", e.lambda)?;
    d.set_item("alpha", e.alpha)?;
    d.set_item("steps", e.steps)?;
    Ok(d)
}

/// Generator, discriminator and both optimizers.
#[pyclass(name = "Trainer", module = "fdnn")]
pub struct PyTrainer {
    inner: model::Trainer,
}

#[pymethods]
impl PyTrainer {
    /// `config` is a JSON object with any training fields; absent ones take defaults.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let config: TrainConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainConfig::default(),
        };
        Ok(PyTrainer {
            inner: model::Trainer::new(config).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: model::load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn epochs_completed(&self) -> u32 {
        self.inner.epochs_completed
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// One epoch over the training split of a dataset directory.
    fn run_epoch<'py>(&mut self, py: Python<'py>, data_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let (train, _, _) = data::load_dataset(&data_dir).map_err(err)?;
        let stats = self.inner.run_epoch(&train).map_err(err)?;
        stats_dict(py, &stats)
    }

    fn generator(&self) -> PyGenerator {
        let mut g = self.inner.generator.clone();
        g.set_mode(fdnn_core::layers::Mode::Eval);
        PyGenerator { inner: g }
    }
}

#[pymodule]
fn fdnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(styles, m)?)?;
    m.add_function(wrap_pyfunction!(gen_face, m)?)?;
    m.add_function(wrap_pyfunction!(stylize, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(chance_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_at, m)?)?;
    Ok(())
}
