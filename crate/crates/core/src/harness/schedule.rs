use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Linear warmup from 0 to `peak`, then cosine decay to `min_lr` at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_lr: f64,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> Result<f64, HarnessError> {
        if step > self.total {
            return Err(HarnessError::Config(format!(
                "schedule queried at step {step} beyond total {}",
                self.total
            )));
        }
        if step < self.warmup {
            return Ok(self.peak * step as f64 / self.warmup as f64);
        }
        let span = self.total - self.warmup;
        if span == 0 {
            return Ok(self.peak);
        }
        let progress = (step - self.warmup) as f64 / span as f64;
        Ok(self.min_lr + 0.5 * (self.peak - self.min_lr) * (1.0 + (PI * progress).cos()))
    }
}
