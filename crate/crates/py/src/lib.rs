//! Python bindings for the `gradbench` engine.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use gradbench::bench;
use gradbench::dataset::synthetic;
use gradbench::imaging;
use gradbench::nn::{checkpoint, MicroResNetConfig, Mode, NUM_CLASSES};
use gradbench::parallel::{self, GradMessage as CoreMessage};
use gradbench::tensor::Tensor;
use gradbench::trainer::{self, Precision, Scheduler, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>], name: &str) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(value_err(format!("{name} rows have different lengths")));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(value_err)
}

/// Round to the nearest binary16 value and widen back to float.
#[pyfunction]
fn quantize_binary16(x: f64) -> f64 {
    trainer::quantize_binary16(x)
}

/// Mean BCE-with-logits over an `[N, C]` batch.
#[pyfunction]
fn bce_with_logits(logits: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<f64> {
    trainer::bce_value(&matrix(&logits, "logits")?, &matrix(&targets, "targets")?).map_err(value_err)
}

/// Share of correct label predictions; positive means probability > threshold.
#[pyfunction]
#[pyo3(signature = (probabilities, truth, threshold = 0.5))]
fn evaluate_accuracy(probabilities: Vec<Vec<f64>>, truth: Vec<Vec<f64>>, threshold: f64) -> PyResult<f64> {
    let classes = probabilities.first().map_or(NUM_CLASSES, Vec::len);
    if probabilities.iter().chain(&truth).any(|r| r.len() != classes) {
        return Err(value_err("every row needs the same number of classes"));
    }
    bench::evaluate_accuracy(&probabilities.concat(), &truth.concat(), classes, threshold).map_err(value_err)
}

#[pyfunction]
fn classify_exposure(mean: f64, std: f64) -> String {
    imaging::classify_exposure(mean, std).to_string()
}

/// Decode PGM/PPM bytes to `(width, height, pixels)` in [0, 1].
#[pyfunction]
fn decode_image(data: &[u8]) -> PyResult<(usize, usize, Vec<f64>)> {
    let img = imaging::decode_image(data).map_err(value_err)?;
    Ok((img.width(), img.height(), img.pixels().to_vec()))
}

/// Decode, resize to `side` and standardize one image.
#[pyfunction]
#[pyo3(signature = (data, side = 32))]
fn preprocess(data: &[u8], side: usize) -> PyResult<Vec<f64>> {
    Ok(imaging::preprocess_one(data, side).map_err(value_err)?.pixels)
}

#[pyfunction]
#[pyo3(signature = (lr0, epoch, step_size = 10, gamma = 0.1))]
fn step_lr(lr0: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    let cfg = TrainConfig {
        lr0,
        scheduler: Scheduler::Step { step_size, gamma },
        ..TrainConfig::default()
    };
    trainer::scheduler_lr(&cfg, epoch)
}

#[pyfunction]
fn render_minutes(seconds: f64) -> String {
    trainer::render_minutes(seconds)
}

/// Gradient message of the data parallel wire protocol.
#[pyclass(module = "gradbench_py", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct GradMessage {
    worker_id: u32,
    step: u64,
    local_batch_size: u32,
    manifest: Vec<u32>,
    payload: Vec<f64>,
}

impl GradMessage {
    fn to_core(&self) -> PyResult<CoreMessage> {
        CoreMessage::new(
            self.worker_id,
            self.step,
            self.local_batch_size,
            self.manifest.clone(),
            self.payload.clone(),
        )
        .map_err(value_err)
    }

    fn from_core(m: CoreMessage) -> Self {
        GradMessage {
            worker_id: m.worker_id,
            step: m.step,
            local_batch_size: m.local_batch_size,
            manifest: m.manifest,
            payload: m.payload,
        }
    }
}

#[pymethods]
impl GradMessage {
    #[new]
    fn new(worker_id: u32, step: u64, local_batch_size: u32, manifest: Vec<u32>, payload: Vec<f64>) -> PyResult<Self> {
        let m = GradMessage {
            worker_id,
            step,
            local_batch_size,
            manifest,
            payload,
        };
        m.to_core()?;
        Ok(m)
    }

    fn encode<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.to_core()?.encode().map_err(value_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        CoreMessage::decode(data).map(Self::from_core).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "GradMessage(worker_id={}, step={}, local_batch_size={}, manifest={:?}, len={})",
            self.worker_id,
            self.step,
            self.local_batch_size,
            self.manifest,
            self.payload.len()
        )
    }
}

/// Batch-size weighted mean of one step's gradient messages.
#[pyfunction]
fn allreduce_mean(messages: Vec<GradMessage>) -> PyResult<GradMessage> {
    let core: Vec<CoreMessage> = messages.iter().map(GradMessage::to_core).collect::<PyResult<_>>()?;
    parallel::allreduce_mean(&core).map(GradMessage::from_core).map_err(value_err)
}

/// Residual network for 14-label classification.
#[pyclass(module = "gradbench_py")]
struct MicroResNet {
    inner: gradbench::nn::MicroResNet,
}

#[pymethods]
impl MicroResNet {
    #[new]
    #[pyo3(signature = (seed = 0, deep = false))]
    fn new(seed: u64, deep: bool) -> PyResult<Self> {
        let cfg = if deep { MicroResNetConfig::deep() } else { MicroResNetConfig::default() };
        Ok(MicroResNet {
            inner: gradbench::nn::MicroResNet::new(cfg, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(MicroResNet {
            inner: checkpoint::load(path.as_ref()).map_err(runtime_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, path.as_ref()).map_err(runtime_err)
    }

    fn param_count(&self) -> usize {
        self.inner.params().numel()
    }

    #[getter]
    fn input_side(&self) -> usize {
        self.inner.config().input_side
    }

    /// Eval-mode logits for a list of flattened `side × side` images.
    fn predict(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let side = self.inner.config().input_side;
        if images.is_empty() || images.iter().any(|i| i.len() != side * side) {
            return Err(value_err(format!("expected a non-empty list of {side}x{side} images")));
        }
        let x = Tensor::new(vec![images.len(), 1, side, side], images.concat()).map_err(value_err)?;
        let mut model = self.inner.clone();
        model.set_mode(Mode::Eval);
        let logits = model.predict(&x).map_err(runtime_err)?;
        Ok(logits.data().chunks(NUM_CLASSES).map(<[f64]>::to_vec).collect())
    }

    /// Train on a seeded synthetic set; returns the per-epoch mean losses.
    #[pyo3(signature = (samples = 32, epochs = 25, seed = 0, workers = 1, mixed = false, step_schedule = false))]
    fn train_synthetic(
        &mut self,
        py: Python<'_>,
        samples: usize,
        epochs: usize,
        seed: u64,
        workers: usize,
        mixed: bool,
        step_schedule: bool,
    ) -> PyResult<Vec<f64>> {
        let side = self.inner.config().input_side;
        let data = synthetic::labeled_set(samples, side, seed).map_err(value_err)?;
        let cfg = TrainConfig {
            epochs,
            seed,
            workers,
            precision: if mixed { Precision::Mixed } else { Precision::Full },
            scheduler: if step_schedule { Scheduler::default_step() } else { Scheduler::None },
            ..TrainConfig::default()
        };
        let model = &mut self.inner;
        let stats = py
            .detach(|| trainer::train_run(&cfg, model, &data))
            .map_err(runtime_err)?;
        Ok(stats.iter().map(|s| s.mean_loss).collect())
    }

    /// Accuracy on a seeded synthetic set.
    #[pyo3(signature = (samples = 64, seed = 0, threshold = 0.5))]
    fn evaluate_synthetic(&self, samples: usize, seed: u64, threshold: f64) -> PyResult<f64> {
        let data = synthetic::labeled_set(samples, self.inner.config().input_side, seed).map_err(value_err)?;
        let (logits, truth) = bench::predict_set(&self.inner, &data, 32).map_err(runtime_err)?;
        bench::accuracy_from_logits(&logits, &truth, threshold).map_err(runtime_err)
    }
}

#[pymodule]
pub fn gradbench_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantize_binary16, m)?)?;
    m.add_function(wrap_pyfunction!(bce_with_logits, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(classify_exposure, m)?)?;
    m.add_function(wrap_pyfunction!(decode_image, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(step_lr, m)?)?;
    m.add_function(wrap_pyfunction!(render_minutes, m)?)?;
    m.add_function(wrap_pyfunction!(allreduce_mean, m)?)?;
    m.add_class::<GradMessage>()?;
    m.add_class::<MicroResNet>()?;
    Ok(())
}
