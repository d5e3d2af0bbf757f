//! Learning-rate schedule: linear warmup then cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_epochs: 10,
            total_epochs: 200,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "need 0 < warmup_epochs <= total_epochs, got {} and {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based). During warmup the rate climbs
    /// linearly to `base_lr`, reaching it on the last warmup epoch; the
    /// remaining epochs follow a half cosine down towards zero. Epochs
    /// past the end are clamped to the final one.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let epoch = epoch.min(self.total_epochs.saturating_sub(1));
        if epoch < self.warmup_epochs {
            return self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = (self.total_epochs - self.warmup_epochs) as f64;
        let t = (epoch - self.warmup_epochs) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
