use std::path::PathBuf;

use modal_emu_core::data::{self, ModalSample, SceneSpec};
use modal_emu_core::losses::BayesianLoss;
use modal_emu_core::metrics::{self as metrics_core, EvalRecord, MetricTable};
use modal_emu_core::trainer::{self, Checkpoint, EpochLog, TrainConfig};
use modal_emu_core::{Error, Graph};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense f64 array in row-major order.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor(modal_emu_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        modal_emu_core::Tensor::new(shape, data).map(PyTensor).map_err(py_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor(modal_emu_core::Tensor::zeros(&shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn sum(&self) -> f64 {
        self.0.sum()
    }

    fn __len__(&self) -> usize {
        self.0.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// One registered RGB/aux image pair with head annotations.
#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample(ModalSample);

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn rgb(&self) -> PyTensor {
        PyTensor(self.0.rgb.clone())
    }

    #[getter]
    fn aux(&self) -> PyTensor {
        PyTensor(self.0.aux.clone())
    }

    #[getter]
    fn points(&self) -> Vec<(f64, f64)> {
        self.0.points.iter().map(|p| (p[0], p[1])).collect()
    }

    fn count(&self) -> usize {
        self.0.count()
    }

    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        data::save_sample(&dir, &self.0).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, size={}x{}, count={})", self.0.id, self.0.height(), self.0.width(), self.0.count())
    }
}

#[pyfunction]
#[pyo3(signature = (seed, height = 64, width = 64, illumination = 1.0))]
fn generate_sample(seed: u64, height: usize, width: usize, illumination: f64) -> PyResult<PySample> {
    let spec = SceneSpec {
        height,
        width,
        illumination,
        seed,
        ..SceneSpec::default()
    };
    data::generate(&spec).map(PySample).map_err(py_err)
}

#[pyfunction]
fn load_sample(dir: PathBuf) -> PyResult<PySample> {
    data::load_sample(&dir).map(PySample).map_err(py_err)
}

#[pyfunction]
fn load_split(root: PathBuf, split: &str) -> PyResult<Vec<PySample>> {
    Ok(data::load_split(&root, split).map_err(py_err)?.into_iter().map(PySample).collect())
}

fn unwrap_samples(samples: &[PySample]) -> Vec<ModalSample> {
    samples.iter().map(|s| s.0.clone()).collect()
}

fn config_from(json: Option<&str>) -> PyResult<TrainConfig> {
    match json {
        Some(text) => TrainConfig::from_json(text).map_err(py_err),
        None => Ok(TrainConfig::default()),
    }
}

/// Counting model; `config` is a JSON training config (defaults when omitted).
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    model: modal_emu_core::Model,
    stride: usize,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = None, seed = None))]
    fn new(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config_from(config)?;
        let model = modal_emu_core::Model::new(cfg.model_config(), seed.unwrap_or(cfg.seed)).map_err(py_err)?;
        Ok(PyModel {
            model,
            stride: cfg.stride,
        })
    }

    /// Loads a checkpoint; `inference_only` skips the emulation parts.
    #[staticmethod]
    #[pyo3(signature = (path, inference_only = true))]
    fn load(path: PathBuf, inference_only: bool) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let model = if inference_only {
            trainer::load_for_inference(&ckpt)
        } else {
            trainer::load_model(&ckpt)
        }
        .map_err(py_err)?;
        Ok(PyModel {
            model,
            stride: ckpt.config.stride,
        })
    }

    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn num_prompt_params(&self) -> usize {
        self.model.num_prompt_params()
    }

    /// Density map `[1, H/8, W/8]` of one sample.
    fn predict(&self, sample: &PySample) -> PyResult<PyTensor> {
        let mut g = self.model.graph();
        g.set_training(false);
        let d = self
            .model
            .predict(&mut g, &sample.0.rgb, &sample.0.aux)
            .map_err(py_err)?;
        Ok(PyTensor(g.value(d).clone()))
    }
}

fn table_dict<'py>(py: Python<'py>, t: &MetricTable) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("game", t.game.to_vec())?;
    d.set_item("rmse", t.rmse)?;
    Ok(d)
}

fn log_dict<'py>(py: Python<'py>, l: &EpochLog) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", l.epoch)?;
    d.set_item("l_bl", l.l_bl)?;
    d.set_item("l_cl", l.l_cl)?;
    d.set_item("l_total", l.l_total)?;
    d.set_item("val_game0", l.val_game0)?;
    d.set_item("val_rmse", l.val_rmse)?;
    Ok(d)
}

#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, samples: Vec<PySample>) -> PyResult<Bound<'py, PyDict>> {
    let e = trainer::evaluate(&model.model, &unwrap_samples(&samples), model.stride).map_err(py_err)?;
    table_dict(py, &e.table)
}

#[pyfunction]
#[pyo3(signature = (model, samples, bin_width = 0.05))]
fn alignment_probe<'py>(
    py: Python<'py>,
    model: &PyModel,
    samples: Vec<PySample>,
    bin_width: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = trainer::alignment_probe(&model.model, &unwrap_samples(&samples), bin_width).map_err(py_err)?;
    let d = PyDict::new(py);
    for (key, h) in [("rgb", &p.rgb), ("aux", &p.aux)] {
        let e = PyDict::new(py);
        e.set_item("percent", h.percent.clone())?;
        e.set_item("median", h.median())?;
        d.set_item(key, e)?;
    }
    Ok(d)
}

/// Training state for one config.
#[pyclass(name = "Trainer")]
struct PyTrainer(trainer::Trainer);

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        trainer::Trainer::new(config_from(config)?).map(PyTrainer).map_err(py_err)
    }

    #[staticmethod]
    fn resume(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        trainer::Trainer::from_checkpoint(&ckpt).map(PyTrainer).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.0.checkpoint().epoch
    }

    fn config_json(&self) -> String {
        self.0.config.to_json()
    }

    /// One optimizer step over `batch`; returns the losses summed over it.
    fn train_step<'py>(&mut self, py: Python<'py>, batch: Vec<PySample>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.0.train_step(&unwrap_samples(&batch)).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("l_bl", r.l_bl)?;
        d.set_item("l_cl", r.l_cl)?;
        Ok(d)
    }

    #[pyo3(signature = (train, val = Vec::new(), out = None))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train: Vec<PySample>,
        val: Vec<PySample>,
        out: Option<PathBuf>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let logs = self
            .0
            .fit(&unwrap_samples(&train), &unwrap_samples(&val), out.as_deref())
            .map_err(py_err)?;
        logs.iter().map(|l| log_dict(py, l)).collect()
    }

    /// Best validated model so far, or the current one.
    fn model(&self) -> PyResult<PyModel> {
        Ok(PyModel {
            model: self.0.best_model().map_err(py_err)?,
            stride: self.0.config.stride,
        })
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.0.checkpoint().save(&path).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (density, points, sigma = 8.0, stride = 8))]
fn bayesian_loss(density: &PyTensor, points: Vec<(f64, f64)>, sigma: f64, stride: usize) -> PyResult<f64> {
    let bl = BayesianLoss {
        sigma,
        stride,
        ..BayesianLoss::default()
    };
    bl.validate().map_err(py_err)?;
    let pts: Vec<_> = points.into_iter().map(|(x, y)| [x, y]).collect();
    let mut g = Graph::new();
    let d = g.constant(density.0.clone());
    let l = bl.loss(&mut g, d, &pts).map_err(py_err)?;
    Ok(g.value(l).item())
}

fn records(densities: Vec<PyTensor>, points: Vec<Vec<(f64, f64)>>, stride: usize) -> PyResult<Vec<EvalRecord>> {
    if densities.len() != points.len() {
        return Err(PyValueError::new_err("one point list per density map is required"));
    }
    Ok(densities
        .into_iter()
        .zip(points)
        .map(|(d, p)| EvalRecord::new(d.0, p.into_iter().map(|(x, y)| [x, y]).collect(), stride))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (densities, points, level, stride = 8))]
fn game(densities: Vec<PyTensor>, points: Vec<Vec<(f64, f64)>>, level: u32, stride: usize) -> PyResult<f64> {
    metrics_core::game(&records(densities, points, stride)?, level).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (densities, points, stride = 8))]
fn rmse(densities: Vec<PyTensor>, points: Vec<Vec<(f64, f64)>>, stride: usize) -> PyResult<f64> {
    metrics_core::rmse(&records(densities, points, stride)?).map_err(py_err)
}

#[pymodule]
fn modal_emu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(load_sample, m)?)?;
    m.add_function(wrap_pyfunction!(load_split, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_probe, m)?)?;
    m.add_function(wrap_pyfunction!(bayesian_loss, m)?)?;
    m.add_function(wrap_pyfunction!(game, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    Ok(())
}
