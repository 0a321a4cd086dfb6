//! Run configuration (JSON) and the named presets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthKind;
use crate::error::{Error, Result};
use crate::masking::{MaskMode, MaskSpec, MultiblockSpec};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::rope::RopeConfig;
use crate::schedule::FreezeSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// MAE with progressive freezing and target switching.
    LayerLock,
    /// Plain pixel MAE; the schedule is ignored.
    Baseline,
    /// Pixel loss plus weighted latent losses on unfrozen layers.
    LatentNoFreeze,
    /// Latent prediction of EMA-teacher features with a separate predictor.
    Jepa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    /// Share of tokens entering a latent loss.
    #[serde(default = "one")]
    pub loss_patch_fraction: f64,
    /// Sum the losses of every target activated so far plus pixels.
    #[serde(default)]
    pub multi_target: bool,
}

fn one() -> f64 {
    1.0
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { loss_patch_fraction: 1.0, multi_target: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightSchedule {
    Const { weight: f64 },
    /// `peak·(1 - cos(2π·step/steps))/2`: zero at the ends, `peak` mid-run.
    Cosine { peak: f64 },
}

impl WeightSchedule {
    pub fn at(&self, step: u64, steps: u64) -> f64 {
        match *self {
            WeightSchedule::Const { weight } => weight,
            WeightSchedule::Cosine { peak } => {
                let x = step as f64 / steps.max(1) as f64;
                peak * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * x).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoFreezeConfig {
    pub weight_schedule: WeightSchedule,
    pub latent_layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JepaConfig {
    pub decoder_depth: usize,
    #[serde(default = "default_ema")]
    pub ema_momentum: f64,
}

fn default_ema() -> f64 {
    0.998
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: SynthKind,
    pub batch_size: usize,
    #[serde(default)]
    pub seed_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub mode: RunMode,
    pub model: ModelConfig,
    pub schedule: FreezeSchedule,
    pub optim: OptimConfig,
    pub mask: MaskSpec,
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub nofreeze: Option<NoFreezeConfig>,
    #[serde(default)]
    pub jepa: Option<JepaConfig>,
    pub data: DataConfig,
    pub steps: u64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Values stored verbatim without being interpreted.
    #[serde(default)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config("config", format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Schedule actually followed by the run.
    pub fn effective_schedule(&self) -> FreezeSchedule {
        match self.mode {
            RunMode::Baseline | RunMode::LatentNoFreeze => FreezeSchedule::disabled(),
            _ => self.schedule.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate(self.model.encoder_depth())?;
        self.optim.validate()?;
        self.mask.validate()?;
        let f = self.target.loss_patch_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config("target.loss_patch_fraction", "must lie in (0, 1]"));
        }
        if self.data.batch_size == 0 {
            return Err(Error::config("data.batch_size", "must be positive"));
        }
        match self.mode {
            RunMode::LayerLock | RunMode::Baseline | RunMode::LatentNoFreeze => {
                if self.model.decoder_blocks == 0 {
                    return Err(Error::config("model.decoder_blocks", "MAE runs need at least one decoder block"));
                }
                if self.mask.mode != MaskMode::RandomIid {
                    return Err(Error::config("mask.mode", "MAE runs use random_iid masking"));
                }
            }
            RunMode::Jepa => {
                let j = self.jepa.as_ref().ok_or_else(|| Error::config("jepa", "required for jepa runs"))?;
                if j.decoder_depth == 0 {
                    return Err(Error::config("jepa.decoder_depth", "must be positive"));
                }
                if !(0.0..=1.0).contains(&j.ema_momentum) {
                    return Err(Error::config("jepa.ema_momentum", "must lie in [0, 1]"));
                }
                if self.model.decoder_blocks != 0 {
                    return Err(Error::config("model.decoder_blocks", "jepa runs use a separate predictor"));
                }
                if self.mask.mode != MaskMode::Multiblock {
                    return Err(Error::config("mask.mode", "jepa runs use multiblock masking"));
                }
            }
        }
        if self.mode == RunMode::LatentNoFreeze {
            let nf = self.nofreeze.as_ref().ok_or_else(|| Error::config("nofreeze", "required for latent_no_freeze runs"))?;
            if nf.latent_layers.iter().any(|&l| l == 0 || l > self.model.encoder_depth()) {
                return Err(Error::config("nofreeze.latent_layers", "layers must lie in 1..=encoder depth"));
            }
        }
        Ok(())
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "vitg-1b",
    "vite-1b",
    "vjepa-l",
    "vitg-250m",
    "vitg-56m",
    "vith-100m",
    "vitb-50m",
    "convergence-vits",
    "toy-mae",
    "toy-mae-baseline",
    "toy-latent-nofreeze",
    "toy-jepa",
    "toy-convergence",
];

fn vit(depth: usize, d_model: usize, n_heads: usize, mlp_ratio: f64, decoder_blocks: usize) -> ModelConfig {
    let rope = RopeConfig::new(d_model);
    ModelConfig {
        depth,
        d_model,
        n_heads,
        mlp_ratio,
        patch_size: [2, 16, 16],
        decoder_blocks,
        rope: Some(rope),
        learned_pos: false,
        input: [16, 224, 224],
        ln_eps: 1e-6,
    }
}

fn large_run(name: &str, model: ModelConfig, schedule: FreezeSchedule, optim: OptimConfig, batch: usize) -> RunConfig {
    RunConfig {
        name: name.to_string(),
        mode: RunMode::LayerLock,
        model,
        schedule,
        steps: optim.total_steps,
        optim,
        mask: MaskSpec::default(),
        target: TargetConfig::default(),
        nofreeze: None,
        jepa: None,
        data: DataConfig { kind: SynthKind::MovingShapes, batch_size: batch, seed_offset: 0 },
        seed: 0,
        checkpoint_every: 0,
        extras: BTreeMap::new(),
    }
}

fn vitg_optim(total: u64) -> OptimConfig {
    OptimConfig { end_lr: 0.0, ..OptimConfig::new(3e-4, 10_000, total) }
}

fn ablation_optim(peak: f64, warmup: u64, total: u64, wd: f64) -> OptimConfig {
    OptimConfig { weight_decay: wd, ..OptimConfig::new(peak, warmup, total) }
}

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        depth: 10,
        d_model: 32,
        n_heads: 4,
        mlp_ratio: 4.0,
        patch_size: [2, 4, 4],
        decoder_blocks: 2,
        rope: Some(RopeConfig::new(32)),
        learned_pos: false,
        input: [4, 16, 16],
        ln_eps: 1e-6,
    }
}

fn toy_optim(steps: u64) -> OptimConfig {
    OptimConfig { end_lr: 1e-5, mini_warmup_steps: 50, ..OptimConfig::new(2e-3, 100, steps) }
}

fn toy_run(name: &str, mode: RunMode, steps: u64) -> RunConfig {
    RunConfig {
        name: name.to_string(),
        mode,
        model: toy_model(),
        schedule: FreezeSchedule::new(1000, 150, 1, 6),
        optim: toy_optim(steps),
        mask: MaskSpec { mask_ratio: 0.5, ..MaskSpec::default() },
        target: TargetConfig::default(),
        nofreeze: None,
        jepa: None,
        data: DataConfig { kind: SynthKind::MovingShapes, batch_size: 8, seed_offset: 0 },
        steps,
        seed: 0,
        checkpoint_every: 0,
        extras: BTreeMap::new(),
    }
}

/// Built-in configuration by name.
pub fn preset(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        "vitg-1b" | "vite-1b" => {
            let start = if name == "vitg-1b" { 160_000 } else { 200_000 };
            let model = vit(48, 1664, 16, 64.0 / 13.0, 4);
            let mut c = large_run(name, model, FreezeSchedule::new(start, 10_000, 1, 32), vitg_optim(488_282), 2048);
            c.extras.insert("examples_seen".into(), serde_json::json!(1_000_000_000u64));
            c
        }
        "vjepa-l" => {
            let mut model = vit(24, 1024, 16, 4.0, 0);
            model.rope = None;
            model.learned_pos = true;
            let optim = OptimConfig {
                init_lr: 1.3e-4,
                end_lr: 6.6e-7,
                weight_decay: 0.04,
                weight_decay_end: Some(0.4),
                ..OptimConfig::new(4.17e-4, 90_000, 262_501)
            };
            let mut c = large_run(name, model, FreezeSchedule::new(100_000, 6000, 1, 24), optim, 2048);
            c.mode = RunMode::Jepa;
            c.mask = MaskSpec { mode: MaskMode::Multiblock, mask_ratio: 0.0, multiblock: MultiblockSpec::default() };
            c.jepa = Some(JepaConfig { decoder_depth: 12, ema_momentum: 0.998 });
            c.extras.insert("stride".into(), serde_json::json!(4));
            c
        }
        "vitg-250m" => {
            let sched = FreezeSchedule::new(25_000, 20_000, 5, 20).with_targets(vec![4, 8, 12, 16]);
            let optim = ablation_optim(1e-4, 5000, 122_070, 0.0);
            large_run(name, vit(48, 1664, 16, 64.0 / 13.0, 4), sched, optim, 2048)
        }
        "vitg-56m" => {
            let sched = FreezeSchedule::new(19_000, 30_000, 5, 44).with_targets((1..=11).map(|i| 4 * i).collect());
            let optim = ablation_optim(1e-4, 5000, 437_500, 0.0);
            large_run(name, vit(48, 1664, 16, 64.0 / 13.0, 4), sched, optim, 128)
        }
        "vith-100m" => {
            let optim = ablation_optim(1e-3, 1000, 12_352, 0.0);
            let mut c = large_run(name, vit(32, 1280, 16, 4.0, 4), FreezeSchedule::disabled(), optim, 8096);
            c.mode = RunMode::Baseline;
            c
        }
        "vitb-50m" => {
            let sched = FreezeSchedule::new(6000, 4000, 2, 8).with_targets(vec![1, 3, 5, 7]);
            let optim = ablation_optim(3e-4, 2000, 97_656, 1e-3);
            large_run(name, vit(12, 768, 12, 4.0, 4), sched, optim, 512)
        }
        "convergence-vits" => {
            let optim = OptimConfig::new(1e-4, 1000, 14_000);
            let mut c = large_run(name, vit(16, 384, 6, 4.0, 4), FreezeSchedule::disabled(), optim, 256);
            c.mode = RunMode::Baseline;
            c
        }
        "toy-mae" => toy_run(name, RunMode::LayerLock, 2000),
        "toy-mae-baseline" => toy_run(name, RunMode::Baseline, 2000),
        "toy-latent-nofreeze" => {
            let mut c = toy_run(name, RunMode::LatentNoFreeze, 2000);
            c.nofreeze = Some(NoFreezeConfig {
                weight_schedule: WeightSchedule::Const { weight: 1.0 },
                latent_layers: (1..=8).collect(),
            });
            c
        }
        "toy-jepa" => {
            let mut c = toy_run(name, RunMode::Jepa, 1000);
            c.model.decoder_blocks = 0;
            c.model.depth = 8;
            c.model.rope = None;
            c.model.learned_pos = true;
            c.mask = MaskSpec {
                mode: MaskMode::Multiblock,
                mask_ratio: 0.0,
                multiblock: MultiblockSpec { num_blocks: 2, block_area_range: (0.15, 0.3), aspect_ratio_range: (0.75, 1.5) },
            };
            c.jepa = Some(JepaConfig { decoder_depth: 2, ema_momentum: 0.99 });
            c.optim.weight_decay = 0.04;
            c.optim.weight_decay_end = Some(0.4);
            c.schedule = FreezeSchedule::new(300, 100, 1, 6);
            c
        }
        "toy-convergence" => {
            let mut c = toy_run(name, RunMode::Baseline, 2000);
            c.model.d_model = 16;
            c.model.n_heads = 2;
            c.model.rope = Some(RopeConfig::new(16));
            c.schedule = FreezeSchedule::disabled();
            c
        }
        _ => {
            return Err(Error::config("preset", format!("unknown preset `{name}`; known: {}", PRESET_NAMES.join(", "))))
        }
    };
    Ok(cfg)
}
