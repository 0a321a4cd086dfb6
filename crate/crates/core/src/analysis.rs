//! Experimental instruments: the layer-convergence grid, collapse
//! diagnostics and loss-window helpers.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunMode};
use crate::data::{synth_video, VideoClip, VideoDims};
use crate::engine::Trainer;
use crate::error::{Error, Result};
use crate::readout::parallel_map;
use crate::schedule::FreezeSchedule;
use crate::tensor::Tensor;

/// Mean of the last `window` entries.
pub fn final_loss_window(trace: &[f64], window: usize) -> Result<f64> {
    if window == 0 || trace.len() < window {
        return Err(Error::Range(format!("trace of {} entries is shorter than window {window}", trace.len())));
    }
    Ok(trace[trace.len() - window..].iter().sum::<f64>() / window as f64)
}

pub fn percent_deviation(final_loss: f64, base: f64) -> f64 {
    100.0 * (final_loss - base) / base
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub layer: usize,
    pub freeze_step: u64,
    pub final_loss: f64,
    pub percent_deviation: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceGrid {
    pub base_loss: f64,
    pub window: usize,
    pub total_steps: u64,
    pub entries: Vec<GridEntry>,
}

impl ConvergenceGrid {
    pub fn get(&self, layer: usize, freeze_step: u64) -> Option<&GridEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.freeze_step == freeze_step)
    }

    /// One baseline row followed by one row per (layer, freeze step).
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "kind,layer,freeze_step,final_loss,percent_deviation,diverged")?;
        writeln!(w, "baseline,,,{},0,false", self.base_loss)?;
        for e in &self.entries {
            writeln!(w, "ablation,{},{},{},{},{}", e.layer, e.freeze_step, e.final_loss, e.percent_deviation, e.diverged)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Baseline configuration of a grid: an MAE run for `total_steps` that
/// never freezes.
pub fn grid_base_config(base: &RunConfig, total_steps: u64) -> Result<RunConfig> {
    if base.mode == RunMode::Jepa {
        return Err(Error::config("mode", "the convergence grid runs on the pixel MAE path"));
    }
    let mut cfg = base.clone();
    cfg.mode = RunMode::LayerLock;
    cfg.schedule = FreezeSchedule::disabled();
    cfg.nofreeze = None;
    cfg.steps = total_steps;
    cfg.optim.total_steps = total_steps;
    cfg.validate()?;
    Ok(cfg)
}

fn run_losses(t: &mut Trainer, until: u64, trace: &mut Vec<f64>) -> Result<()> {
    t.run_until(until, |r| {
        trace.push(r.loss);
        Ok(())
    })
}

/// Trains the unfrozen baseline, then for every `(L, T)` an identical run
/// with a single hard freeze of `L` blocks at step `T` (targets stay on
/// pixels). Ablation runs branch from the baseline's state at step `T`,
/// which is the state an identical run would have reached. Divergent runs
/// are kept and flagged.
pub fn convergence_grid(
    base: &RunConfig,
    layers: &[usize],
    freeze_steps: &[u64],
    total_steps: u64,
    window: usize,
    jobs: usize,
) -> Result<ConvergenceGrid> {
    let cfg = grid_base_config(base, total_steps)?;
    let depth = cfg.model.encoder_depth();
    if let Some(&l) = layers.iter().find(|&&l| l > depth) {
        return Err(Error::config("layers", format!("layer {l} exceeds encoder depth {depth}")));
    }
    if let Some(&t) = freeze_steps.iter().find(|&&t| t >= total_steps) {
        return Err(Error::config("freeze_steps", format!("freeze step {t} must be below {total_steps}")));
    }
    if window as u64 > total_steps {
        return Err(Error::config("window", "longer than the run"));
    }
    let mut ts: Vec<u64> = freeze_steps.to_vec();
    ts.sort_unstable();
    ts.dedup();

    let mut base_run = Trainer::new(cfg)?;
    let mut trace = Vec::with_capacity(total_steps as usize);
    let mut snapshots = Vec::with_capacity(ts.len());
    for &t in &ts {
        run_losses(&mut base_run, t, &mut trace)?;
        snapshots.push((base_run.clone_run(), trace.clone()));
    }
    run_losses(&mut base_run, total_steps, &mut trace)?;
    let base_loss = final_loss_window(&trace, window)?;

    let cells: Vec<(usize, u64, usize)> = freeze_steps
        .iter()
        .flat_map(|&t| layers.iter().map(move |&l| (l, t)))
        .map(|(l, t)| (l, t, ts.binary_search(&t).expect("collected above")))
        .collect();
    let entries = parallel_map(&cells, jobs, |&(layer, t, snap)| {
        let (run, prefix) = &snapshots[snap];
        let mut run = run.clone_run();
        run.set_schedule(FreezeSchedule::hard_freeze(t, layer))?;
        let mut trace = prefix.clone();
        match run_losses(&mut run, total_steps, &mut trace) {
            Ok(()) => {
                let final_loss = final_loss_window(&trace, window)?;
                Ok(GridEntry { layer, freeze_step: t, final_loss, percent_deviation: percent_deviation(final_loss, base_loss), diverged: false })
            }
            Err(Error::Divergence { .. }) => {
                Ok(GridEntry { layer, freeze_step: t, final_loss: f64::NAN, percent_deviation: f64::NAN, diverged: true })
            }
            Err(e) => Err(e),
        }
    })?;
    Ok(ConvergenceGrid { base_loss, window, total_steps, entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// `"freeze_step"` when deviation grows with later freezing, `"layer"`
    /// when it shrinks with deeper freezing.
    pub axis: String,
    pub layer: usize,
    pub freeze_step: u64,
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub layers: Vec<usize>,
    pub freeze_steps: Vec<u64>,
    /// Seed-averaged deviation, `mean[layer_idx][step_idx]`.
    pub mean: Vec<Vec<f64>>,
    /// Largest across-seed standard deviation of any cell.
    pub seed_spread: f64,
    pub tolerance: f64,
    /// Every ordering break, including those inside the tolerance.
    pub violations: Vec<Violation>,
}

impl MonotonicityReport {
    pub fn beyond_tolerance(&self) -> Vec<&Violation> {
        self.violations.iter().filter(|v| v.excess > self.tolerance).collect()
    }

    pub fn passes(&self) -> bool {
        self.beyond_tolerance().is_empty() && self.mean.iter().flatten().all(|v| v.is_finite())
    }
}

/// Checks that seed-averaged deviation is nonincreasing in the freeze step
/// and nondecreasing in the layer; breaks larger than `tolerance`
/// (percentage points) fail.
pub fn monotonicity_report(grids: &[ConvergenceGrid], layers: &[usize], freeze_steps: &[u64], tolerance: f64) -> Result<MonotonicityReport> {
    if grids.is_empty() {
        return Err(Error::Contract("no grids to compare".into()));
    }
    let mut ls = layers.to_vec();
    ls.sort_unstable();
    let mut ts = freeze_steps.to_vec();
    ts.sort_unstable();
    let mut mean = vec![vec![0.0; ts.len()]; ls.len()];
    let mut seed_spread: f64 = 0.0;
    for (i, &l) in ls.iter().enumerate() {
        for (j, &t) in ts.iter().enumerate() {
            let vals: Vec<f64> = grids
                .iter()
                .map(|g| g.get(l, t).map(|e| e.percent_deviation).ok_or_else(|| Error::Contract(format!("grid lacks cell ({l}, {t})"))))
                .collect::<Result<_>>()?;
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            seed_spread = seed_spread.max(var.sqrt());
            mean[i][j] = m;
        }
    }
    let mut violations = Vec::new();
    for (i, &l) in ls.iter().enumerate() {
        for j in 1..ts.len() {
            let excess = mean[i][j] - mean[i][j - 1];
            if excess > 0.0 {
                violations.push(Violation { axis: "freeze_step".into(), layer: l, freeze_step: ts[j], excess });
            }
        }
    }
    for (j, &t) in ts.iter().enumerate() {
        for i in 1..ls.len() {
            let excess = mean[i - 1][j] - mean[i][j];
            if excess > 0.0 {
                violations.push(Violation { axis: "layer".into(), layer: ls[i], freeze_step: t, excess });
            }
        }
    }
    Ok(MonotonicityReport { layers: ls, freeze_steps: ts, mean, seed_spread, tolerance, violations })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    pub token_variance: f64,
    pub batch_variance: f64,
    pub effective_rank: f64,
}

/// Collapse diagnostics of per-clip features (`B` tensors of `N × D`).
///
/// `token_variance` averages the per-channel variance over all `B·N`
/// tokens, `batch_variance` the per-channel variance of the clip means, and
/// `effective_rank` is `exp(H(σ/Σσ))` over the singular values of the
/// `(B·N) × D` feature matrix (0 for an all-zero matrix).
pub fn collapse_metrics(features: &[Tensor]) -> Result<CollapseMetrics> {
    if features.len() < 2 {
        return Err(Error::Range(format!("collapse metrics need B >= 2 clips, got {}", features.len())));
    }
    let (n, d) = (features[0].rows(), features[0].cols());
    if let Some(f) = features.iter().find(|f| f.rows() != n || f.cols() != d) {
        return Err(Error::shape("collapse_metrics", format!("{:?} vs [{n}, {d}]", f.shape())));
    }
    let b = features.len();
    let total = (b * n) as f64;
    let mut mean = vec![0.0; d];
    let mut clip_means = vec![vec![0.0; d]; b];
    for (c, f) in features.iter().enumerate() {
        for r in 0..n {
            for (j, &v) in f.row(r).iter().enumerate() {
                mean[j] += v;
                clip_means[c][j] += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    clip_means.iter_mut().flatten().for_each(|m| *m /= n as f64);

    let mut token_var = 0.0;
    let mut stacked = DMatrix::<f64>::zeros(b * n, d);
    for (c, f) in features.iter().enumerate() {
        for r in 0..n {
            for (j, &v) in f.row(r).iter().enumerate() {
                token_var += (v - mean[j]).powi(2);
                stacked[(c * n + r, j)] = v;
            }
        }
    }
    let token_variance = token_var / (total * d as f64);
    let mut batch_var = 0.0;
    for cm in &clip_means {
        for j in 0..d {
            batch_var += (cm[j] - mean[j]).powi(2);
        }
    }
    let batch_variance = batch_var / (b * d) as f64;

    let sv: Vec<f64> = stacked.singular_values().iter().copied().collect();
    Ok(CollapseMetrics { token_variance, batch_variance, effective_rank: entropy_rank(&sv) })
}

/// `exp` of the entropy of the normalized singular values.
pub fn entropy_rank(singular_values: &[f64]) -> f64 {
    let s: f64 = singular_values.iter().sum();
    if s <= 0.0 {
        return 0.0;
    }
    let h: f64 = singular_values
        .iter()
        .map(|&v| v / s)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// Fixed probe clips for collapse tracking, disjoint from training seeds.
pub fn probe_clips(cfg: &RunConfig, count: usize) -> Result<Vec<VideoClip>> {
    let i = cfg.model.input;
    let dims = VideoDims::new(i[0], i[1], i[2]);
    (0..count as u64).map(|k| synth_video(cfg.data.kind, 0xC011_A95E_0000_0000 ^ k, dims)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapsePoint {
    pub step: u64,
    pub metrics: CollapseMetrics,
}

/// Trains `run` to `steps`, measuring collapse metrics of encoder block
/// `layer` on `probes` every `every` steps (and at the end).
pub fn collapse_trace(run: &mut Trainer, probes: &[VideoClip], layer: usize, steps: u64, every: u64) -> Result<Vec<CollapsePoint>> {
    if every == 0 {
        return Err(Error::Range("measurement interval must be positive".into()));
    }
    let mut out = Vec::new();
    loop {
        let step = run.state.step;
        if step % every == 0 || step == steps {
            let metrics = collapse_metrics(&run.features(probes, layer)?)?;
            out.push(CollapsePoint { step, metrics });
        }
        if step >= steps {
            return Ok(out);
        }
        run.train_step()?;
    }
}

/// First step whose token variance falls below `fraction` of the value at
/// `reference_step`, or whose effective rank drops below `min_rank`.
pub fn collapse_step(trace: &[CollapsePoint], reference_step: u64, fraction: f64, min_rank: f64) -> Option<u64> {
    let reference = trace.iter().find(|p| p.step == reference_step)?.metrics.token_variance;
    trace
        .iter()
        .filter(|p| p.step >= reference_step)
        .find(|p| p.metrics.token_variance < fraction * reference || p.metrics.effective_rank < min_rank)
        .map(|p| p.step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        let trace: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(final_loss_window(&trace, 1000).unwrap(), 499.5);
        assert_eq!(final_loss_window(&trace, 1).unwrap(), 999.0);
        assert_eq!(final_loss_window(&[2.5; 7], 3).unwrap(), 2.5);
        assert!(final_loss_window(&trace, 1001).is_err());
    }

    #[test]
    fn identical_features_collapse() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let m = collapse_metrics(&[f.clone(), f]).unwrap();
        assert_eq!(m.token_variance, 0.0);
        assert_eq!(m.batch_variance, 0.0);
        assert!((m.effective_rank - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_features_have_zero_rank() {
        let z = Tensor::zeros(&[4, 3]);
        assert_eq!(collapse_metrics(&[z.clone(), z]).unwrap().effective_rank, 0.0);
    }

    #[test]
    fn single_clip_rejected() {
        assert!(collapse_metrics(&[Tensor::zeros(&[4, 3])]).is_err());
    }
}
