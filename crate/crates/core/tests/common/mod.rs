//! Shared helpers: a central finite-difference oracle and tiny configs.
#![allow(dead_code)]

use layerlock::model::ModelConfig;
use layerlock::rope::RopeConfig;
use layerlock::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Fourth-order central differences of `f` at every entry of `x`.
pub fn central_diff(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |dx: f64| {
            probe.data_mut()[i] = orig + dx;
            f(&probe)
        };
        let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    out
}

/// Largest relative error between an analytic gradient and the oracle.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic.data().iter().zip(numeric.data()).map(|(&a, &n)| rel_err(a, n, floor)).fold(0.0, f64::max)
}

/// A ViT small enough for exhaustive gradient checks: 2 encoder blocks,
/// 1 decoder block, width 12 over a 2×2×2 token grid.
pub fn tiny_vit() -> ModelConfig {
    ModelConfig {
        depth: 3,
        d_model: 12,
        n_heads: 2,
        mlp_ratio: 2.0,
        patch_size: [2, 4, 4],
        decoder_blocks: 1,
        rope: Some(RopeConfig::new(12)),
        learned_pos: false,
        input: [4, 8, 8],
        ln_eps: 1e-6,
    }
}

/// `preset` with the tiny model, batch 2, a freeze at steps 3 and 6 and an
/// optimizer horizon of `steps`.
pub fn tiny_run(preset: &str, steps: u64) -> layerlock::config::RunConfig {
    let mut cfg = layerlock::config::preset(preset).expect("preset");
    cfg.model = tiny_vit();
    cfg.data.batch_size = 2;
    cfg.steps = steps;
    cfg.schedule = layerlock::schedule::FreezeSchedule::new(3, 3, 1, 2);
    cfg.optim = layerlock::optim::OptimConfig { mini_warmup_steps: 2, ..layerlock::optim::OptimConfig::new(1e-3, 2, steps) };
    cfg
}
