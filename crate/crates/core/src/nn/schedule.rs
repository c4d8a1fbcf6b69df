//! Linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate at `step` of `total_steps`.
///
/// The first `ceil(warmup_frac * total_steps)` steps ramp linearly from 0 to
/// `lr_max`; the rest follow a half cosine from `lr_max` down to `lr_min`.
pub fn cosine_warmup_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64, warmup_frac: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::BadSchedule("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::BadSchedule(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = (warmup_frac * total_steps as f64).ceil() as u64;
    if step < warmup {
        return Ok(lr_max * step as f64 / warmup as f64);
    }
    let progress = if total_steps == warmup {
        1.0
    } else {
        (step - warmup) as f64 / (total_steps - warmup) as f64
    };
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CosineWarmup {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
}

impl Default for CosineWarmup {
    fn default() -> Self {
        Self { lr_max: 1e-3, lr_min: 1e-5, warmup_frac: 0.02 }
    }
}

impl CosineWarmup {
    pub fn lr(&self, step: u64, total_steps: u64) -> Result<f64> {
        cosine_warmup_lr(step, total_steps, self.lr_max, self.lr_min, self.warmup_frac)
    }
}
