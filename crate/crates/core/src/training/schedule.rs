//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// Linear ramp from 0 to `lr_max` over `warmup_steps`, then half a cosine
    /// down to `lr_min` at `total_steps`, held there afterwards.
    CosineWarmup {
        lr_max: f64,
        lr_min: f64,
        warmup_steps: u64,
        total_steps: u64,
    },
    /// Cosine from `lr_max` to `lr_min` within each period, restarting at
    /// every multiple of `period`.
    WarmRestarts {
        lr_max: f64,
        lr_min: f64,
        period: u64,
    },
    Constant {
        lr: f64,
    },
}

impl ScheduleSpec {
    /// AdamW pairing: 1e-3 down to 1e-8 after 5k warm-up steps.
    pub fn cosine_warmup(total_steps: u64) -> Self {
        ScheduleSpec::CosineWarmup {
            lr_max: 1e-3,
            lr_min: 1e-8,
            warmup_steps: 5_000,
            total_steps,
        }
    }

    /// Adam pairing: 1e-3 down to 5e-6, restarting every 100k steps.
    pub fn warm_restarts() -> Self {
        ScheduleSpec::WarmRestarts {
            lr_max: 1e-3,
            lr_min: 5e-6,
            period: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |lr_max: f64, lr_min: f64| {
            if lr_max.is_finite() && lr_max > lr_min && lr_min > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "need lr_max > lr_min > 0, got {lr_max} and {lr_min}"
                )))
            }
        };
        match *self {
            ScheduleSpec::CosineWarmup {
                lr_max,
                lr_min,
                warmup_steps,
                total_steps,
            } => {
                range(lr_max, lr_min)?;
                if warmup_steps > total_steps {
                    return Err(Error::invalid("warmup_steps exceeds total_steps"));
                }
                Ok(())
            }
            ScheduleSpec::WarmRestarts { lr_max, lr_min, period } => {
                range(lr_max, lr_min)?;
                if period == 0 {
                    return Err(Error::invalid("period must be positive"));
                }
                Ok(())
            }
            ScheduleSpec::Constant { lr } => {
                if lr.is_finite() && lr >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "constant lr must be finite and non-negative, got {lr}"
                    )))
                }
            }
        }
    }
}

fn cosine(lr_max: f64, lr_min: f64, progress: f64) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos())
}

pub fn lr_at(step: u64, spec: &ScheduleSpec) -> f64 {
    match *spec {
        ScheduleSpec::CosineWarmup {
            lr_max,
            lr_min,
            warmup_steps,
            total_steps,
        } => {
            if step == 0 {
                0.0
            } else if step < warmup_steps {
                (lr_max * step as f64 / warmup_steps as f64).max(lr_min)
            } else if step >= total_steps {
                lr_min
            } else {
                let span = (total_steps - warmup_steps) as f64;
                cosine(lr_max, lr_min, (step - warmup_steps) as f64 / span)
            }
        }
        ScheduleSpec::WarmRestarts { lr_max, lr_min, period } => {
            cosine(lr_max, lr_min, (step % period) as f64 / period as f64)
        }
        ScheduleSpec::Constant { lr } => lr,
    }
}
