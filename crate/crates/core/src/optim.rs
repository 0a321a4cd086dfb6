//! AdamW with decoupled weight decay, the cosine learning-rate envelope and
//! the post-switch mini-warmup multiplier.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{is_decay_exempt, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub peak_lr: f64,
    #[serde(default)]
    pub end_lr: f64,
    /// Learning rate at step 0; the warmup ramps linearly from here.
    #[serde(default)]
    pub init_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default = "default_b1")]
    pub b1: f64,
    #[serde(default = "default_b2")]
    pub b2: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// When set, weight decay moves linearly from `weight_decay` to this
    /// value over `total_steps`.
    #[serde(default)]
    pub weight_decay_end: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_mini_warmup")]
    pub mini_warmup_steps: u64,
}

fn default_b1() -> f64 {
    0.9
}
fn default_b2() -> f64 {
    0.95
}
fn default_wd() -> f64 {
    0.05
}
fn default_eps() -> f64 {
    1e-8
}
fn default_mini_warmup() -> u64 {
    1000
}

impl OptimConfig {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            peak_lr,
            end_lr: 0.0,
            init_lr: 0.0,
            warmup_steps,
            total_steps,
            b1: default_b1(),
            b2: default_b2(),
            weight_decay: default_wd(),
            weight_decay_end: None,
            eps: default_eps(),
            mini_warmup_steps: default_mini_warmup(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, b) in [("optim.b1", self.b1), ("optim.b2", self.b2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(field, "must lie in (0, 1)"));
            }
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("optim.warmup_steps", "must be smaller than total_steps"));
        }
        if !(self.peak_lr > 0.0) || self.end_lr < 0.0 || self.init_lr < 0.0 {
            return Err(Error::config("optim.peak_lr", "learning rates must be non-negative, peak positive"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("optim.eps", "eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// Linear warmup from `init_lr` to `peak_lr`, then cosine decay to `end_lr`,
/// held at `end_lr` past `total_steps`.
pub fn cosine_lr(step: u64, cfg: &OptimConfig) -> f64 {
    if step < cfg.warmup_steps {
        let frac = step as f64 / cfg.warmup_steps as f64;
        return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * frac;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.end_lr + (cfg.peak_lr - cfg.end_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// `min(1, (step - last_switch + 1) / W)`; 1 when there was no switch or `W = 0`.
pub fn mini_warmup_multiplier(step: u64, last_switch_step: Option<u64>, mini_warmup_steps: u64) -> f64 {
    match last_switch_step {
        Some(s) if mini_warmup_steps > 0 && step >= s => {
            ((step - s + 1) as f64 / mini_warmup_steps as f64).min(1.0)
        }
        _ => 1.0,
    }
}

pub fn effective_lr(step: u64, last_switch_step: Option<u64>, cfg: &OptimConfig) -> f64 {
    cosine_lr(step, cfg) * mini_warmup_multiplier(step, last_switch_step, cfg.mini_warmup_steps)
}

pub fn weight_decay_at(step: u64, cfg: &OptimConfig) -> f64 {
    match cfg.weight_decay_end {
        None => cfg.weight_decay,
        Some(end) => {
            let frac = (step as f64 / cfg.total_steps.max(1) as f64).min(1.0);
            cfg.weight_decay + (end - cfg.weight_decay) * frac
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied so far, for bias correction.
    pub t: u64,
}

/// Adam moments, one entry per trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    entries: BTreeMap<String, Moments>,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Moments> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, moments: Moments) {
        self.entries.insert(name.into(), moments);
    }

    pub fn remove(&mut self, name: &str) -> Option<Moments> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Moments)> {
        self.entries.iter()
    }

    /// Parameter scalars covered by the state (each has two moments).
    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|(n, _)| pred(n)).map(|(_, e)| e.m.len()).sum()
    }

    pub fn numel(&self) -> usize {
        self.numel_where(|_| true)
    }
}

/// One AdamW step over every parameter named in `grads`. Parameters absent
/// from `grads` are not touched.
pub fn adamw_update(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    lr: f64,
    weight_decay: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        let e = state.entries.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            t: 0,
        });
        e.t += 1;
        let bc1 = 1.0 - cfg.b1.powi(e.t as i32);
        let bc2 = 1.0 - cfg.b2.powi(e.t as i32);
        let wd = if is_decay_exempt(name) { 0.0 } else { weight_decay };
        let (m, v) = (e.m.data_mut(), e.v.data_mut());
        for (i, (theta, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.b1 * m[i] + (1.0 - cfg.b1) * gi;
            v[i] = cfg.b2 * v[i] + (1.0 - cfg.b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *theta -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * *theta);
        }
        if !p.is_finite() {
            return Err(Error::NonFinite { op: "adamw" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimConfig {
        OptimConfig { end_lr: 1e-6, ..OptimConfig::new(1e-3, 100, 1100) }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        assert_eq!(cosine_lr(0, &c), 0.0);
        assert_eq!(cosine_lr(100, &c), 1e-3);
        assert!((cosine_lr(600, &c) - (1e-6 + (1e-3 - 1e-6) / 2.0)).abs() < 1e-18);
        assert!((cosine_lr(1100, &c) - 1e-6).abs() < 1e-18);
        assert_eq!(cosine_lr(5000, &c), cosine_lr(1100, &c));
    }

    #[test]
    fn mini_warmup_values() {
        assert_eq!(mini_warmup_multiplier(500, Some(500), 1000), 0.001);
        assert_eq!(mini_warmup_multiplier(1499, Some(500), 1000), 1.0);
        assert_eq!(mini_warmup_multiplier(500, Some(500), 0), 1.0);
        assert_eq!(mini_warmup_multiplier(10, None, 1000), 1.0);
    }

    #[test]
    fn weight_decay_schedule() {
        let c = OptimConfig { weight_decay: 0.04, weight_decay_end: Some(0.4), ..cfg() };
        assert_eq!(weight_decay_at(0, &c), 0.04);
        assert!((weight_decay_at(1100, &c) - 0.4).abs() < 1e-15);
        assert_eq!(weight_decay_at(1100, &cfg()), 0.05);
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        assert!(OptimConfig { b2: 1.0, ..cfg() }.validate().is_err());
        assert!(OptimConfig { warmup_steps: 1100, ..cfg() }.validate().is_err());
    }

    #[test]
    fn exempt_gain_unchanged_under_decay() {
        let mut p = ParamStore::new();
        p.insert("norm1.g", Tensor::ones(&[3]));
        p.insert("w", Tensor::ones(&[3]));
        let mut grads = BTreeMap::new();
        grads.insert("norm1.g".to_string(), Tensor::zeros(&[3]));
        grads.insert("w".to_string(), Tensor::zeros(&[3]));
        let mut st = OptState::new();
        adamw_update(&mut p, &grads, &mut st, 0.1, 0.5, &cfg()).unwrap();
        assert_eq!(p.get("norm1.g").unwrap(), &Tensor::ones(&[3]));
        assert!(p.get("w").unwrap().data().iter().all(|&v| (v - 0.95).abs() < 1e-15));
        assert_eq!(st.len(), 2);
    }
}
