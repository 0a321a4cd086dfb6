//! The step → frozen-prefix function and the target it implies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Target;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeSchedule {
    pub start: u64,
    pub interval: u64,
    pub jump: usize,
    pub max_frozen: usize,
    /// Target layer for the `e`-th freeze event (1-based `e`); the last entry
    /// is reused once the list runs out. Defaults to the frozen prefix.
    #[serde(default)]
    pub target_layers: Option<Vec<usize>>,
    /// When false, freezing leaves the target on pixels.
    #[serde(default = "yes")]
    pub switch_targets: bool,
}

fn yes() -> bool {
    true
}

impl FreezeSchedule {
    pub fn new(start: u64, interval: u64, jump: usize, max_frozen: usize) -> Self {
        Self { start, interval, jump, max_frozen, target_layers: None, switch_targets: true }
    }

    /// A schedule that never freezes.
    pub fn disabled() -> Self {
        Self::new(0, 1, 0, 0)
    }

    /// A single freeze of `layers` blocks at `step`, targets stay on pixels.
    pub fn hard_freeze(step: u64, layers: usize) -> Self {
        Self { switch_targets: false, ..Self::new(step, u64::MAX, layers, layers) }
    }

    pub fn is_disabled(&self) -> bool {
        self.max_frozen == 0 || self.jump == 0
    }

    pub fn with_targets(mut self, targets: Vec<usize>) -> Self {
        self.target_layers = Some(targets);
        self
    }

    pub fn validate(&self, encoder_depth: usize) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::config("schedule.interval", "must be positive"));
        }
        if self.max_frozen > encoder_depth {
            return Err(Error::config(
                "schedule.max_frozen",
                format!("{} exceeds encoder depth {encoder_depth}", self.max_frozen),
            ));
        }
        if let Some(t) = &self.target_layers {
            if t.is_empty() {
                return Err(Error::config("schedule.target_layers", "must not be empty"));
            }
            for (i, &layer) in t.iter().enumerate() {
                let prefix = (self.jump * (i + 1)).min(self.max_frozen);
                if layer == 0 || layer > prefix {
                    return Err(Error::config(
                        "schedule.target_layers",
                        format!("target {layer} for event {} must lie in 1..={prefix}", i + 1),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `0` before `start`, else `min(max_frozen, jump·(1 + ⌊(step-start)/interval⌋))`.
    pub fn frozen(&self, step: u64) -> usize {
        if self.is_disabled() || step < self.start {
            return 0;
        }
        let events = 1 + (step - self.start) / self.interval;
        let k = (self.jump as u128).saturating_mul(events as u128);
        k.min(self.max_frozen as u128) as usize
    }

    /// Prediction target once `k` blocks are frozen.
    pub fn target_for_prefix(&self, k: usize) -> Target {
        if k == 0 || !self.switch_targets || self.jump == 0 {
            return Target::Pixels;
        }
        let event = k.div_ceil(self.jump);
        match &self.target_layers {
            Some(t) => Target::Layer(t[event.min(t.len()) - 1].min(k)),
            None => Target::Layer(k),
        }
    }

    pub fn target_at(&self, step: u64) -> Target {
        self.target_for_prefix(self.frozen(step))
    }

    /// Steps in `0..steps` at which the frozen prefix grows.
    pub fn event_steps(&self, steps: u64) -> Vec<u64> {
        let mut out = Vec::new();
        if self.is_disabled() {
            return out;
        }
        let mut prev = 0;
        let mut s = self.start;
        while s < steps {
            let k = self.frozen(s);
            if k > prev {
                out.push(s);
                prev = k;
            }
            if k >= self.max_frozen {
                break;
            }
            s = match s.checked_add(self.interval) {
                Some(n) => n,
                None => break,
            };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vitg_landmarks() {
        let s = FreezeSchedule::new(160_000, 10_000, 1, 32);
        assert_eq!(s.frozen(0), 0);
        assert_eq!(s.frozen(159_999), 0);
        assert_eq!(s.frozen(160_000), 1);
        assert_eq!(s.frozen(479_999), 32);
        assert_eq!(s.frozen(10_000_000), 32);
    }

    #[test]
    fn ablation_baseline_targets() {
        let s = FreezeSchedule::new(6000, 4000, 2, 8).with_targets(vec![1, 3, 5, 7]);
        assert!(s.validate(8).is_ok());
        assert_eq!(s.frozen(6000), 2);
        assert_eq!(s.frozen(10_000), 4);
        assert_eq!(s.target_at(5999), Target::Pixels);
        assert_eq!(s.target_at(6000), Target::Layer(1));
        assert_eq!(s.target_at(10_000), Target::Layer(3));
        assert_eq!(s.target_at(100_000), Target::Layer(7));
    }

    #[test]
    fn hard_freeze_keeps_pixels() {
        let s = FreezeSchedule::hard_freeze(500, 4);
        assert_eq!(s.frozen(499), 0);
        assert_eq!(s.frozen(500), 4);
        assert_eq!(s.frozen(u64::MAX), 4);
        assert_eq!(s.target_at(600), Target::Pixels);
        assert_eq!(s.event_steps(2000), vec![500]);
        assert!(FreezeSchedule::hard_freeze(5, 0).is_disabled());
    }

    #[test]
    fn event_steps_match_frozen() {
        let s = FreezeSchedule::new(200, 100, 1, 6);
        assert_eq!(s.event_steps(800), vec![200, 300, 400, 500, 600, 700]);
        assert!(FreezeSchedule::disabled().event_steps(800).is_empty());
    }

    #[test]
    fn invalid_targets_rejected() {
        let s = FreezeSchedule::new(0, 10, 1, 4).with_targets(vec![2]);
        assert!(s.validate(8).is_err());
        assert!(FreezeSchedule::new(0, 10, 1, 9).validate(8).is_err());
    }
}
