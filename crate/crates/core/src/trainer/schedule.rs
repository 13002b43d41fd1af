use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ScheduleSpec {
    /// `base * factor^floor(iteration / step)`.
    #[serde(rename = "step")]
    StepLR { base_lr: f64, factor: f64, step: usize },
    /// `base * factor^epoch`.
    #[serde(rename = "exponential")]
    ExponentialLR { base_lr: f64, factor: f64 },
}

impl ScheduleSpec {
    pub fn step(base_lr: f64, factor: f64, step: usize) -> Self {
        ScheduleSpec::StepLR { base_lr, factor, step }
    }

    pub fn exponential(base_lr: f64, factor: f64) -> Self {
        ScheduleSpec::ExponentialLR { base_lr, factor }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            ScheduleSpec::StepLR { base_lr, .. } | ScheduleSpec::ExponentialLR { base_lr, .. } => base_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (base, factor) = match *self {
            ScheduleSpec::StepLR { base_lr, factor, step } => {
                if step == 0 {
                    return Err(Error::config("step schedule needs a positive step"));
                }
                (base_lr, factor)
            }
            ScheduleSpec::ExponentialLR { base_lr, factor } => (base_lr, factor),
        };
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::config(format!(
                "base learning rate must be positive, got {base}"
            )));
        }
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::config(format!("decay factor must lie in (0, 1], got {factor}")));
        }
        Ok(())
    }

    pub fn lr(&self, iteration: usize, epoch: usize) -> f64 {
        schedule_lr(self, iteration, epoch)
    }
}

pub fn schedule_lr(spec: &ScheduleSpec, iteration: usize, epoch: usize) -> f64 {
    let exp = |k: usize| k.min(i32::MAX as usize) as i32;
    match *spec {
        ScheduleSpec::StepLR { base_lr, factor, step } => {
            let k = exp(iteration / step.max(1));
            // Divide when 1/factor is an integer so 0.1 yields exactly base/10.
            let divisor = 1.0 / factor;
            if divisor == divisor.round() {
                base_lr / divisor.powi(k)
            } else {
                base_lr * factor.powi(k)
            }
        }
        ScheduleSpec::ExponentialLR { base_lr, factor } => base_lr * factor.powi(exp(epoch)),
    }
}
