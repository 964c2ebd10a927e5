use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `base_lr`, then inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f32,
    pub warmup_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 7e-4,
            warmup_steps: 4000,
        }
    }
}

impl Schedule {
    /// `base_lr · min(step · w^-1.5, step^-0.5) / w^-0.5` for 1-based `step`.
    pub fn lr_at(&self, step: u64) -> Result<f32> {
        if step == 0 {
            return Err(Error::Precondition("learning-rate steps are 1-based".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be at least 1"));
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        let factor = (s * w.powf(-1.5)).min(s.powf(-0.5)) / w.powf(-0.5);
        Ok((self.base_lr as f64 * factor) as f32)
    }
}
