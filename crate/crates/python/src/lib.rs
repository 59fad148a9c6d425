//! Python bindings. Images cross the boundary as flat channel-major lists of
//! floats in `[0, 1]`; masks as flat lists of 0/1.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cadm::cli;
use cadm::config::RunConfig;
use cadm::data::synthetic::{synthetic_pair, SyntheticConfig};
use cadm::data::{BitemporalPair, Mask, RgbImage};
use cadm::metrics::{confusion_slices, ConfusionCounts, Metrics, Pooling};
use cadm::predictor::CadmModel;
use cadm::sampler::{predict_pairs, SamplerConfig};
use cadm::schedule::{self, ScheduleConfig};
use cadm::training::Checkpoint;

fn err(e: cadm::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_config(config_toml: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match config_toml {
        Some(t) => RunConfig::from_toml(t).map_err(err)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("recall", m.recall)?;
    d.set_item("precision", m.precision)?;
    d.set_item("oa", m.oa)?;
    d.set_item("f1", m.f1)?;
    d.set_item("iou", m.iou)?;
    Ok(d)
}

/// Linear beta schedule with precomputed cumulative products.
#[pyclass(name = "NoiseSchedule")]
struct PySchedule {
    inner: schedule::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=100, beta_start=1e-4, beta_end=0.02, reference_steps=1000))]
    fn new(steps: usize, beta_start: f64, beta_end: f64, reference_steps: usize) -> PyResult<Self> {
        let cfg = ScheduleConfig { steps, beta_start, beta_end, reference_steps };
        Ok(Self { inner: cfg.build().map_err(err)? })
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.num_steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// Noised sample `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` at a 1-based `t`.
    fn q_sample(&self, x0: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        if x0.len() != eps.len() {
            return Err(PyValueError::new_err("x0 and eps differ in length"));
        }
        self.inner.check_timestep(t).map_err(err)?;
        let ab = self.inner.alpha_bar(t);
        Ok(x0.iter().zip(&eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect())
    }
}

fn pair_dict<'py>(py: Python<'py>, p: &BitemporalPair) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", &p.name)?;
    d.set_item("height", p.label.height)?;
    d.set_item("width", p.label.width)?;
    d.set_item("image_a", p.image_a.data.clone())?;
    d.set_item("image_b", p.image_b.data.clone())?;
    d.set_item("label", p.label.data.clone())?;
    Ok(d)
}

/// One synthetic bitemporal pair, deterministic in `(name, seed)`.
#[pyfunction]
#[pyo3(signature = (name, seed=0, size=64))]
fn synthetic(py: Python<'_>, name: &str, seed: u64, size: usize) -> PyResult<Py<PyDict>> {
    let cfg = SyntheticConfig { size, ..Default::default() };
    cfg.validate().map_err(err)?;
    Ok(pair_dict(py, &synthetic_pair(name, seed, &cfg))?.unbind())
}

/// `(tp, fp, fn, tn)` of a binary prediction against a binary label.
#[pyfunction]
fn confusion(pred: Vec<u8>, gt: Vec<u8>) -> PyResult<(u64, u64, u64, u64)> {
    let c = confusion_slices(&pred, &gt).map_err(err)?;
    Ok((c.tp, c.fp, c.fn_, c.tn))
}

#[pyfunction]
fn metrics(py: Python<'_>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Py<PyDict>> {
    let m = Metrics::from_counts(&ConfusionCounts { tp, fp, fn_, tn });
    Ok(metrics_dict(py, &m)?.unbind())
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    model: CadmModel,
    schedule: schedule::NoiseSchedule,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model from a TOML run configuration.
    #[new]
    #[pyo3(signature = (config_toml=None))]
    fn new(config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config_toml)?;
        Ok(Self {
            model: cli::new_model(&cfg).map_err(err)?,
            schedule: cfg.schedule.build().map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            model: ckpt.model().map_err(err)?,
            schedule: ckpt.schedule.build().map_err(err)?,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params().num_parameters()
    }

    /// Ensemble change map for one pair. Returns `{"soft", "binary"}`.
    #[pyo3(signature = (image_a, image_b, height, width, steps=None, ensemble=5, seed=0, name="pair"))]
    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        py: Python<'_>,
        image_a: Vec<f32>,
        image_b: Vec<f32>,
        height: usize,
        width: usize,
        steps: Option<usize>,
        ensemble: usize,
        seed: u64,
        name: &str,
    ) -> PyResult<Py<PyDict>> {
        let channels = self.model.config().image_channels;
        let pair = BitemporalPair {
            name: name.to_string(),
            image_a: RgbImage::from_vec(channels, height, width, image_a).map_err(err)?,
            image_b: RgbImage::from_vec(channels, height, width, image_b).map_err(err)?,
            label: Mask::new(1, height, width),
        };
        pair.validate().map_err(err)?;
        let cfg = SamplerConfig {
            steps: steps.unwrap_or(self.schedule.num_steps()),
            ensemble_size: ensemble,
            seed,
            ..Default::default()
        };
        let maps = predict_pairs(&self.model, &self.schedule, &[&pair], &cfg, self.model.dtype()).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("soft", maps[0].soft.clone())?;
        d.set_item("binary", maps[0].binary.data.clone())?;
        Ok(d.unbind())
    }
}

/// Trains per the configuration, writing checkpoints under `out_dir`.
/// Returns the per-epoch mean training losses.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=None))]
fn train(out_dir: PathBuf, config_toml: Option<&str>) -> PyResult<Vec<f64>> {
    let mut cfg = parse_config(config_toml)?;
    cfg.output.dir = out_dir;
    let (_, logs) = cli::cmd_train(&cfg, None).map_err(err)?;
    Ok(logs.iter().map(|l| l.train_loss).collect())
}

/// Evaluates the latest checkpoint in `out_dir` (or `checkpoint`) on a split.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=None, checkpoint=None, split="test"))]
fn evaluate(
    py: Python<'_>,
    out_dir: PathBuf,
    config_toml: Option<&str>,
    checkpoint: Option<PathBuf>,
    split: &str,
) -> PyResult<Py<PyDict>> {
    let mut cfg = parse_config(config_toml)?;
    cfg.output.dir = out_dir;
    let out = cli::cmd_eval(&cfg, checkpoint.as_deref(), split, false, Pooling::Micro).map_err(err)?;
    Ok(metrics_dict(py, &out.metrics)?.unbind())
}

#[pymodule]
fn cadm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
