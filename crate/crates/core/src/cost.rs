//! Analytic FLOPs and peak-memory model of one training step.
//!
//! Counting rules: a matmul of `m×k` by `k×n` costs `2·m·k·n`. A block over
//! `M` tokens costs `2M(3D² + D² + 2DH) + 4M²D` forward (QKV, projection,
//! MLP, scores and mixing). Backward costs twice the forward of every
//! trainable component and nothing for frozen ones. Norms and pointwise
//! ops are ignored.
//!
//! Per clip the step runs: the context pass (embed + encoder over `K`
//! visible tokens), the decoder over `K + N` tokens, the heads over `N`
//! latents, and optionally a forward-only target pass over the full grid
//! through the target layer.
//!
//! Memory = parameters + two Adam moments per trainable parameter + the
//! activations retained for backward by trainable components. Per block
//! over `M` tokens we keep `M(8D + 2H)` values plus `2·heads·M²` attention
//! maps; the embedding keeps its `K×P` input and each head its `N×D` input.

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Target};
use crate::schedule::FreezeSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetPass {
    /// Targets are raw pixels; no target forward pass is run.
    #[default]
    PixelOnly,
    /// Latent targets from a forward pass truncated at the target layer.
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSettings {
    pub batch_size: usize,
    /// Visible tokens per clip.
    pub keep_tokens: usize,
    pub bytes_per_value: usize,
    pub target_pass: TargetPass,
}

impl CostSettings {
    pub fn new(batch_size: usize, keep_tokens: usize) -> Self {
        Self { batch_size, keep_tokens, bytes_per_value: 4, target_pass: TargetPass::PixelOnly }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub frozen: usize,
    pub forward: f64,
    pub backward: f64,
    pub target: f64,
    pub total: f64,
    pub memory_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_step: Vec<StepCost>,
    pub cumulative: Vec<f64>,
    pub peak_memory: Vec<f64>,
    pub events: Vec<u64>,
}

impl CostReport {
    pub fn total_flops(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn max_memory(&self) -> f64 {
        self.peak_memory.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn linear_flops(rows: usize, fan_in: usize, fan_out: usize) -> f64 {
    2.0 * rows as f64 * fan_in as f64 * fan_out as f64
}

pub fn block_flops(cfg: &ModelConfig, m: usize) -> f64 {
    let (d, h) = (cfg.d_model, cfg.mlp_hidden());
    linear_flops(m, d, 3 * d) + linear_flops(m, d, d) + linear_flops(m, d, h) + linear_flops(m, h, d)
        + 2.0 * linear_flops(m, d, m)
}

pub fn block_numel(cfg: &ModelConfig) -> usize {
    let (d, h) = (cfg.d_model, cfg.mlp_hidden());
    4 * d * d + 2 * d * h + 9 * d + h
}

pub fn embed_numel(cfg: &ModelConfig) -> usize {
    let pos = if cfg.learned_pos { cfg.n_tokens() * cfg.d_model } else { 0 };
    cfg.patch_dim() * cfg.d_model + cfg.d_model + pos
}

pub fn head_out(cfg: &ModelConfig, target: Target) -> usize {
    match target {
        Target::Pixels => cfg.patch_dim(),
        Target::Layer(_) => cfg.d_model,
    }
}

pub fn head_numel(cfg: &ModelConfig, target: Target) -> usize {
    let o = head_out(cfg, target);
    cfg.d_model * o + o
}

fn block_activations(cfg: &ModelConfig, m: usize) -> f64 {
    let (d, h) = (cfg.d_model as f64, cfg.mlp_hidden() as f64);
    let m = m as f64;
    m * (8.0 * d + 2.0 * h) + 2.0 * cfg.n_heads as f64 * m * m
}

/// Cost of one step with `k` frozen blocks and the given active heads.
pub fn step_cost(cfg: &ModelConfig, k: usize, heads: &[Target], s: &CostSettings) -> StepCost {
    let n = cfg.n_tokens();
    let kt = s.keep_tokens;
    let enc = cfg.encoder_depth();
    let (d, p) = (cfg.d_model, cfg.patch_dim());

    let mut fwd = 0.0;
    let mut bwd = 0.0;
    let mut acts = 0.0;
    let embed = linear_flops(kt, p, d);
    fwd += embed;
    if k == 0 {
        bwd += 2.0 * embed;
        acts += (kt * p) as f64;
    }
    for layer in 1..=enc {
        let f = block_flops(cfg, kt);
        fwd += f;
        if layer > k {
            bwd += 2.0 * f;
            acts += block_activations(cfg, kt);
        }
    }
    for _ in 0..cfg.decoder_blocks {
        let f = block_flops(cfg, kt + n);
        fwd += f;
        bwd += 2.0 * f;
        acts += block_activations(cfg, kt + n);
    }
    for &t in heads {
        let f = linear_flops(n, d, head_out(cfg, t));
        fwd += f;
        bwd += 2.0 * f;
        acts += (n * d) as f64;
    }
    let deepest = heads.iter().map(|t| t.layer()).max().unwrap_or(0);
    let mut target = 0.0;
    if s.target_pass == TargetPass::Truncated && deepest > 0 {
        target += linear_flops(n, p, d);
        for _ in 0..deepest {
            target += block_flops(cfg, n);
        }
    }

    let b = s.batch_size as f64;
    let (fwd, bwd, target) = (fwd * b, bwd * b, target * b);

    let head_params: usize = heads.iter().map(|&t| head_numel(cfg, t)).sum();
    let all = embed_numel(cfg) + cfg.depth * block_numel(cfg) + head_params;
    let frozen = if k > 0 { embed_numel(cfg) + k * block_numel(cfg) } else { 0 };
    let trainable = all - frozen;
    let bpv = s.bytes_per_value as f64;
    let memory = (all as f64 + 2.0 * trainable as f64 + acts * b) * bpv;

    StepCost { frozen: k, forward: fwd, backward: bwd, target, total: fwd + bwd + target, memory_bytes: memory }
}

/// Per-step, cumulative and memory series for `steps` steps of `sched`.
pub fn flops_estimate(cfg: &ModelConfig, sched: &FreezeSchedule, s: &CostSettings, steps: u64) -> CostReport {
    let mut per_step = Vec::with_capacity(steps as usize);
    let mut cumulative = Vec::with_capacity(steps as usize);
    let mut peak_memory = Vec::with_capacity(steps as usize);
    let mut acc = 0.0;
    let mut cache: Option<(usize, StepCost)> = None;
    for step in 0..steps {
        let k = sched.frozen(step);
        let c = match cache {
            Some((ck, c)) if ck == k => c,
            _ => {
                let c = step_cost(cfg, k, &[sched.target_for_prefix(k)], s);
                cache = Some((k, c));
                c
            }
        };
        acc += c.total;
        per_step.push(c);
        cumulative.push(acc);
        peak_memory.push(c.memory_bytes);
    }
    CostReport { per_step, cumulative, peak_memory, events: sched.event_steps(steps) }
}

/// Relative saving of `frozen` over `baseline` total FLOPs.
pub fn savings(frozen: &CostReport, baseline: &CostReport) -> f64 {
    1.0 - frozen.total_flops() / baseline.total_flops()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hand_count() {
        assert_eq!(linear_flops(1, 2, 3), 12.0);
    }

    #[test]
    fn truncated_pass_adds_target_forward_only() {
        let cfg = crate::config::toy_model();
        let n = cfg.n_tokens();
        let pixel = CostSettings::new(3, 16);
        let trunc = CostSettings { target_pass: TargetPass::Truncated, ..pixel };
        for j in [1usize, 4] {
            let a = step_cost(&cfg, j, &[Target::Layer(j)], &pixel);
            let b = step_cost(&cfg, j, &[Target::Layer(j)], &trunc);
            // embedding plus j full-grid blocks with a 4x MLP, per clip
            let dp = (cfg.d_model * cfg.patch_dim()) as f64;
            let blk = 2.0 * n as f64 * 12.0 * (cfg.d_model * cfg.d_model) as f64 + 4.0 * (n * n * cfg.d_model) as f64;
            let want = 3.0 * (2.0 * n as f64 * dp + j as f64 * blk);
            assert_eq!((a.target, a.forward, a.backward, a.memory_bytes), (0.0, b.forward, b.backward, b.memory_bytes));
            assert!((b.target - want).abs() <= 1e-12 * want, "{} vs {want}", b.target);
        }
        let p = step_cost(&cfg, 0, &[Target::Pixels], &trunc);
        assert_eq!(p.target, 0.0);
    }
}
