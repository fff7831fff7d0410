//! Learning-rate and validation schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference schedule lengths; other run lengths keep the same warmup fraction.
pub const REFERENCE_TOTAL_STEPS: usize = 120_000;
pub const REFERENCE_WARMUP_STEPS: usize = 1_200;

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 without restarts.
pub fn warmup_cosine(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay = total_steps.saturating_sub(warmup_steps);
    if decay == 0 {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / decay as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Warmup length for `total_steps`, proportional to the 1,200 / 120,000 reference.
pub fn scaled_warmup(total_steps: usize) -> usize {
    if total_steps == REFERENCE_TOTAL_STEPS {
        return REFERENCE_WARMUP_STEPS;
    }
    let scaled = (total_steps as f64 * REFERENCE_WARMUP_STEPS as f64 / REFERENCE_TOTAL_STEPS as f64).round() as usize;
    scaled.min(total_steps.saturating_sub(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CadenceStage {
    pub from_step: usize,
    pub interval: usize,
}

/// Piecewise-constant validation interval, keyed by training step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CadenceTable {
    pub stages: Vec<CadenceStage>,
}

impl CadenceTable {
    /// Every 4 steps, widening to 2, 3 and 5 epochs at steps 100, 500 and 1000.
    pub fn reference(steps_per_epoch: usize) -> Self {
        let epoch = steps_per_epoch.max(1);
        Self {
            stages: vec![
                CadenceStage { from_step: 0, interval: 4 },
                CadenceStage { from_step: 100, interval: 2 * epoch },
                CadenceStage { from_step: 500, interval: 3 * epoch },
                CadenceStage { from_step: 1000, interval: 5 * epoch },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.stages.is_empty()
            && self.stages[0].from_step == 0
            && self.stages.iter().all(|s| s.interval > 0)
            && self.stages.windows(2).all(|w| w[0].from_step < w[1].from_step);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("cadence stages must start at step 0, ascend, and have positive intervals".into()))
        }
    }

    /// True at step 0, at each stage start, and every `interval` steps within a stage.
    pub fn should_validate(&self, step: usize) -> bool {
        let stage = self.stages.iter().rev().find(|s| s.from_step <= step).expect("first stage starts at 0");
        (step - stage.from_step) % stage.interval == 0
    }
}
