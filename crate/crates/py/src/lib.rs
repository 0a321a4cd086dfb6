//! Python bindings for the layerlock core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use layerlock_core::analysis;
use layerlock_core::checkpoint;
use layerlock_core::config::{self, RunConfig};
use layerlock_core::cost::{self, CostSettings};
use layerlock_core::data::{self, SynthKind, VideoDims};
use layerlock_core::engine;
use layerlock_core::masking::keep_count;
use layerlock_core::metrics::StepRecord;
use layerlock_core::readout::{self, ReadoutBudget, ReadoutTask};
use layerlock_core::schedule;
use layerlock_core::tensor::Tensor;
use layerlock_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Integrity(_) => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn record_dict<'py>(py: Python<'py>, r: &StepRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("loss", r.loss)?;
    d.set_item("lr", r.lr)?;
    d.set_item("frozen_prefix", r.frozen_prefix)?;
    d.set_item("target", &r.target)?;
    d.set_item("flops_step", r.flops_step)?;
    for (k, v) in &r.extras {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Names of the built-in presets.
#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    config::PRESET_NAMES.to_vec()
}

/// A preset rendered as JSON.
#[pyfunction]
fn preset_json(name: &str) -> PyResult<String> {
    config::preset(name).and_then(|c| c.to_json()).map_err(to_py)
}

#[pyclass(name = "FreezeSchedule", module = "layerlock")]
struct PyFreezeSchedule {
    inner: schedule::FreezeSchedule,
}

#[pymethods]
impl PyFreezeSchedule {
    #[new]
    #[pyo3(signature = (start, interval, jump, max_frozen, target_layers=None))]
    fn new(start: u64, interval: u64, jump: usize, max_frozen: usize, target_layers: Option<Vec<usize>>) -> Self {
        let mut inner = schedule::FreezeSchedule::new(start, interval, jump, max_frozen);
        inner.target_layers = target_layers;
        Self { inner }
    }

    /// Number of frozen encoder blocks at `step`.
    fn frozen(&self, step: u64) -> usize {
        self.inner.frozen(step)
    }

    /// Prediction target at `step` (`"pixels"` or `"layerK"`).
    fn target_at(&self, step: u64) -> String {
        self.inner.target_at(step).to_string()
    }

    fn event_steps(&self, steps: u64) -> Vec<u64> {
        self.inner.event_steps(steps)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!("FreezeSchedule(start={}, interval={}, jump={}, max_frozen={})", s.start, s.interval, s.jump, s.max_frozen)
    }
}

/// A training run.
#[pyclass(name = "Trainer", module = "layerlock", unsendable)]
struct PyTrainer {
    inner: engine::Trainer,
}

#[pymethods]
impl PyTrainer {
    /// Builds a run from a JSON config.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_json(config_json).map_err(to_py)?;
        Ok(Self { inner: engine::Trainer::new(cfg).map_err(to_py)? })
    }

    /// Builds a run from a preset with optional step and seed overrides.
    #[staticmethod]
    #[pyo3(signature = (name, steps=None, seed=None))]
    fn from_preset(name: &str, steps: Option<u64>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = config::preset(name).map_err(to_py)?;
        if let Some(n) = steps {
            cfg.steps = n;
            cfg.optim.total_steps = n;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self { inner: engine::Trainer::new(cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load_checkpoint(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    /// One optimizer step; returns the metrics record.
    fn train_step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.train_step().map_err(to_py)?;
        record_dict(py, &r)
    }

    /// Runs `n` steps and returns their records.
    fn run<'py>(&mut self, py: Python<'py>, n: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let until = self.inner.state.step + n;
        let mut out = Vec::new();
        while self.inner.state.step < until {
            let r = self.inner.train_step().map_err(to_py)?;
            out.push(record_dict(py, &r)?);
        }
        Ok(out)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.state.step
    }

    #[getter]
    fn frozen_prefix(&self) -> usize {
        self.inner.state.frozen_prefix
    }

    fn config_json(&self) -> PyResult<String> {
        self.inner.cfg().to_json().map_err(to_py)
    }

    /// Scalars held by the optimizer state.
    fn optimizer_numel(&self) -> usize {
        self.inner.state.opt.numel()
    }

    /// Collapse metrics of encoder block `layer` on `n_clips` probe clips.
    #[pyo3(signature = (layer, n_clips=16))]
    fn collapse_metrics<'py>(&self, py: Python<'py>, layer: usize, n_clips: usize) -> PyResult<Bound<'py, PyDict>> {
        let probes = analysis::probe_clips(self.inner.cfg(), n_clips).map_err(to_py)?;
        let feats = self.inner.features(&probes, layer).map_err(to_py)?;
        metrics_dict(py, &analysis::collapse_metrics(&feats).map_err(to_py)?)
    }

    /// Best readout row of the learning-rate × depth sweep.
    #[pyo3(signature = (task="classify", train_clips=256, test_clips=128, steps=2000))]
    fn eval_readout<'py>(&self, py: Python<'py>, task: &str, train_clips: usize, test_clips: usize, steps: u64) -> PyResult<Bound<'py, PyDict>> {
        let task = match task {
            "classify" => ReadoutTask::Classify,
            "dense" => ReadoutTask::Dense,
            other => return Err(PyValueError::new_err(format!("unknown task `{other}`"))),
        };
        let mut budget = ReadoutBudget { train_clips, test_clips, ..ReadoutBudget::default() };
        budget.readout.steps = steps;
        let rep = readout::train_and_eval_readout(self.inner.backbone(), &self.inner.state.params, task, &budget).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("metric", rep.best.metric)?;
        d.set_item("lr", rep.best.lr)?;
        d.set_item("depth_fraction", rep.best.depth_fraction)?;
        d.set_item("layer", rep.best.layer)?;
        Ok(d)
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &analysis::CollapseMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("token_variance", m.token_variance)?;
    d.set_item("batch_variance", m.batch_variance)?;
    d.set_item("effective_rank", m.effective_rank)?;
    Ok(d)
}

/// Collapse metrics of features given as `B` lists of `N` rows of width `D`.
#[pyfunction]
fn collapse_metrics<'py>(py: Python<'py>, features: Vec<Vec<Vec<f64>>>) -> PyResult<Bound<'py, PyDict>> {
    let ts: Vec<Tensor> = features.iter().map(|rows| Tensor::from_rows(rows)).collect::<Result<_, _>>().map_err(to_py)?;
    metrics_dict(py, &analysis::collapse_metrics(&ts).map_err(to_py)?)
}

/// Analytic cost series of a config against the same run without freezing.
#[pyfunction]
#[pyo3(signature = (config_json, steps=None))]
fn flops_estimate<'py>(py: Python<'py>, config_json: &str, steps: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_json(config_json).map_err(to_py)?;
    let steps = steps.unwrap_or(cfg.steps);
    let s = CostSettings::new(cfg.data.batch_size, keep_count(cfg.model.n_tokens(), cfg.mask.mask_ratio));
    let frozen = cost::flops_estimate(&cfg.model, &cfg.effective_schedule(), &s, steps);
    let base = cost::flops_estimate(&cfg.model, &schedule::FreezeSchedule::disabled(), &s, steps);
    let d = PyDict::new(py);
    d.set_item("per_step", frozen.per_step.iter().map(|c| c.total).collect::<Vec<_>>())?;
    d.set_item("cumulative", frozen.cumulative.clone())?;
    d.set_item("peak_memory", frozen.peak_memory.clone())?;
    d.set_item("baseline_cumulative", base.cumulative.clone())?;
    d.set_item("events", frozen.events.clone())?;
    d.set_item("savings", cost::savings(&frozen, &base))?;
    Ok(d)
}

/// A synthetic clip as a dict with flat `frames`, its `shape` and labels.
#[pyfunction]
#[pyo3(signature = (kind, seed, frames=4, height=16, width=16))]
fn synth_video<'py>(py: Python<'py>, kind: &str, seed: u64, frames: usize, height: usize, width: usize) -> PyResult<Bound<'py, PyDict>> {
    let kind = match kind {
        "moving_shapes" => SynthKind::MovingShapes,
        "gradient_field" => SynthKind::GradientField,
        other => return Err(PyValueError::new_err(format!("unknown generator `{other}`"))),
    };
    let clip = data::synth_video(kind, seed, VideoDims::new(frames, height, width)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("shape", clip.frames.shape().to_vec())?;
    d.set_item("frames", clip.frames.data().to_vec())?;
    d.set_item("label", clip.label.and_then(|l| l.class()))?;
    d.set_item("dense_target", clip.dense_target.map(|t| t.data().to_vec()))?;
    Ok(d)
}

#[pymodule]
fn layerlock(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFreezeSchedule>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(preset_json, m)?)?;
    m.add_function(wrap_pyfunction!(collapse_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(flops_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_video, m)?)?;
    Ok(())
}
