use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cotune_core::pipeline::{self, PipelineConfig, RunOptions};
use cotune_core::segmentation::segment_threshold;
use cotune_core::{
    fusion, temporal, ClipPlan, ClipWeighting, Conditioning, DenoiserConfig, DenoiserModel, Error, FrameShape,
    FusionConfig, LatentFrame, MaskGrid, MaskPair, NoiseSchedule, Video,
};

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    if e.is_config() {
        PyValueError::new_err(msg)
    } else if e.is_numeric() {
        PyArithmeticError::new_err(msg)
    } else {
        match e.root() {
            Error::Io { .. } => PyIOError::new_err(msg),
            Error::ShapeMismatch { .. } | Error::InvalidArgument { .. } | Error::TimestepOutOfRange { .. } => {
                PyValueError::new_err(msg)
            }
            _ => PyRuntimeError::new_err(msg),
        }
    }
}

/// A latent frame of shape `(height, width, channels)`, values row-major with
/// the channel index fastest.
#[pyclass(name = "Frame", module = "cotune", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFrame {
    inner: LatentFrame,
}

#[pymethods]
impl PyFrame {
    #[new]
    fn new(shape: (usize, usize, usize), values: Vec<f64>) -> PyResult<Self> {
        let inner = LatentFrame::from_vec(FrameShape::new(shape.0, shape.1, shape.2), values).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn gaussian(shape: (usize, usize, usize), seed: u64) -> Self {
        let mut rng = cotune_core::seeding::stream(seed, "python", 0);
        Self {
            inner: LatentFrame::gaussian(FrameShape::new(shape.0, shape.1, shape.2), &mut rng),
        }
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::read_frame(&path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        pipeline::write_frame(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.shape();
        (s.height, s.width, s.channels)
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.values().len()
    }

    fn __repr__(&self) -> String {
        format!("Frame(shape={})", self.inner.shape())
    }
}

#[pyclass(name = "Schedule", module = "cotune", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps, beta_start = 8.5e-4, beta_end = 1.2e-2))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self {
            inner: NoiseSchedule::scaled_linear(steps, beta_start, beta_end).map_err(to_py)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.check_step(t).map_err(to_py)?;
        Ok(self.inner.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.check_time(t).map_err(to_py)?;
        Ok(self.inner.alpha_bar(t))
    }

    fn forward_jump(&self, x0: &PyFrame, t: usize, noise: &PyFrame) -> PyResult<PyFrame> {
        let inner = self.inner.forward_jump(&x0.inner, t, &noise.inner).map_err(to_py)?;
        Ok(PyFrame { inner })
    }

    fn predict_x0(&self, xt: &PyFrame, eps: &PyFrame, t: usize) -> PyResult<PyFrame> {
        let inner = self.inner.predict_x0(&xt.inner, &eps.inner, t).map_err(to_py)?;
        Ok(PyFrame { inner })
    }

    fn posterior_mean(&self, x0: &PyFrame, xt: &PyFrame, t: usize) -> PyResult<PyFrame> {
        let inner = self.inner.posterior_mean(&x0.inner, &xt.inner, t).map_err(to_py)?;
        Ok(PyFrame { inner })
    }

    /// Deterministic DDIM step from `t` to `t - 1`.
    fn ddim_step(&self, xt: &PyFrame, t: usize, eps: &PyFrame) -> PyResult<PyFrame> {
        let inner = self
            .inner
            .ddim_step(&xt.inner, t, &eps.inner, 0.0, None)
            .map_err(to_py)?;
        Ok(PyFrame { inner })
    }
}

#[pyclass(name = "Denoiser", module = "cotune", frozen)]
struct PyDenoiser {
    inner: DenoiserModel,
}

#[pymethods]
impl PyDenoiser {
    #[new]
    #[pyo3(signature = (shape, steps, seed, hidden = 32, time_dim = 8, pos_dim = 4, h_dim = 8, c_dim = 8))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        shape: (usize, usize, usize),
        steps: usize,
        seed: u64,
        hidden: usize,
        time_dim: usize,
        pos_dim: usize,
        h_dim: usize,
        c_dim: usize,
    ) -> PyResult<Self> {
        let config = DenoiserConfig {
            frame: FrameShape::new(shape.0, shape.1, shape.2),
            hidden,
            time_dim,
            pos_dim,
            h_dim,
            c_dim,
            steps,
        };
        Ok(Self {
            inner: DenoiserModel::init(config, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DenoiserModel::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn predict_noise(&self, xt: &PyFrame, t: usize, h: Vec<f64>, c: Vec<f64>) -> PyResult<PyFrame> {
        let inner = self
            .inner
            .predict_noise(&xt.inner, t, &Conditioning::new(h, c))
            .map_err(to_py)?;
        Ok(PyFrame { inner })
    }
}

/// Complementary foreground/background masks.
#[pyclass(name = "Masks", module = "cotune", frozen)]
struct PyMasks {
    inner: MaskPair,
}

#[pymethods]
impl PyMasks {
    #[new]
    fn new(height: usize, width: usize, foreground: Vec<bool>) -> PyResult<Self> {
        let fg = MaskGrid::from_bits(height, width, foreground).map_err(to_py)?;
        Ok(Self {
            inner: MaskPair::from_foreground(fg),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (frame, threshold = 0.0))]
    fn threshold(frame: &PyFrame, threshold: f64) -> PyResult<Self> {
        Ok(Self {
            inner: segment_threshold(&frame.inner, threshold).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MaskPair::load(&path, None).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn foreground(&self) -> Vec<bool> {
        self.inner.fg().bits().to_vec()
    }

    #[getter]
    fn foreground_count(&self) -> usize {
        self.inner.fg().count()
    }
}

/// Masked backgrounds averaged with weight `w1`, plus `w2` times the masked
/// foreground.
#[pyfunction]
#[pyo3(signature = (backgrounds, foreground, masks, w1 = 1.0, w2 = 1.0))]
fn average_fuse(
    backgrounds: Vec<PyRef<'_, PyFrame>>,
    foreground: &PyFrame,
    masks: &PyMasks,
    w1: f64,
    w2: f64,
) -> PyResult<PyFrame> {
    let bgs: Vec<LatentFrame> = backgrounds.iter().map(|f| f.inner.clone()).collect();
    let cfg = FusionConfig {
        n: bgs.len(),
        k: 1,
        w1,
        w2,
    };
    let inner = fusion::average_fuse(&bgs, &foreground.inner, &masks.inner, &cfg).map_err(to_py)?;
    Ok(PyFrame { inner })
}

/// Merges overlapping clips into one video. `clip_weights` holds one scalar
/// per clip; all-ones when omitted.
#[pyfunction]
#[pyo3(signature = (clips, stride, clip_weights = None))]
fn merge_clips(
    clips: Vec<Vec<PyRef<'_, PyFrame>>>,
    stride: usize,
    clip_weights: Option<Vec<f64>>,
) -> PyResult<Vec<PyFrame>> {
    let videos = clips
        .iter()
        .map(|c| Video::new(c.iter().map(|f| f.inner.clone()).collect()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let first = videos.first().ok_or_else(|| PyValueError::new_err("no clips"))?;
    let k = first.len();
    let frames = stride * (videos.len() - 1) + k;
    let s = first.shape();
    let weighting = clip_weights.map_or(ClipWeighting::Uniform, |weights| ClipWeighting::PerClip { weights });
    let plan = ClipPlan::new(frames, stride, k, (s.height, s.width), &weighting).map_err(to_py)?;
    let merged = temporal::merge_clips(&videos, &plan).map_err(to_py)?;
    Ok(merged
        .into_frames()
        .into_iter()
        .map(|inner| PyFrame { inner })
        .collect())
}

/// Consistency report of a frame sequence as a dict.
#[pyfunction]
#[pyo3(signature = (frames, masks = None))]
fn compute_consistency<'py>(
    py: Python<'py>,
    frames: Vec<PyRef<'_, PyFrame>>,
    masks: Option<&PyMasks>,
) -> PyResult<Bound<'py, PyDict>> {
    let video = Video::new(frames.iter().map(|f| f.inner.clone()).collect()).map_err(to_py)?;
    let r = pipeline::compute_consistency(&video, masks.map(|m| &m.inner)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("per_pair", r.per_pair)?;
    d.set_item("mean", r.mean)?;
    d.set_item("max", r.max)?;
    if let Some(reg) = r.regions {
        d.set_item("fg_mean", reg.fg_mean)?;
        d.set_item("bg_mean", reg.bg_mean)?;
    }
    Ok(d)
}

/// Runs the whole pipeline from a config file and returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config_path, seed_override = None, dump_intermediates = false))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    seed_override: Option<u64>,
    dump_intermediates: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = PipelineConfig::load(&config_path).map_err(to_py)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let opts = RunOptions { dump_intermediates };
    let summary = py.detach(|| pipeline::run_pipeline(&cfg, &opts)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("output_dir", summary.output_dir)?;
    d.set_item("mean_difference", summary.report.mean)?;
    d.set_item("baseline_mean_difference", summary.baseline.map(|b| b.mean))?;
    d.set_item("final_loss", summary.final_loss)?;
    Ok(d)
}

/// Default pipeline config as TOML text.
#[pyfunction]
#[pyo3(signature = (full_scale = false))]
fn default_config(full_scale: bool) -> String {
    if full_scale {
        PipelineConfig::full_scale()
    } else {
        PipelineConfig::default()
    }
    .to_toml_string()
}

#[pymodule]
fn cotune(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFrame>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_class::<PyMasks>()?;
    m.add_function(wrap_pyfunction!(average_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(merge_clips, m)?)?;
    m.add_function(wrap_pyfunction!(compute_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
