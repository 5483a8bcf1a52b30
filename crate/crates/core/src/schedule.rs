//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("inverse square root schedule is undefined at step 0 without warmup")]
    ZeroStep,
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Isr,
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Base rate for `isr`, peak rate for `cosine` and `constant`.
    pub peak_lr: f64,
    /// Rate reached at `total_steps` by `cosine`; `None` means `peak_lr / 20`.
    pub final_lr: Option<f64>,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Isr,
            peak_lr: 1.0,
            final_lr: None,
            warmup_steps: 10_000,
            total_steps: 1 << 16,
        }
    }
}

impl ScheduleSpec {
    pub fn final_lr(&self) -> f64 {
        self.final_lr.unwrap_or(self.peak_lr / 20.0)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.peak_lr >= 0.0) || !(self.final_lr() >= 0.0) {
            return Err(ScheduleError::Invalid("learning rates must be nonnegative".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(ScheduleError::Invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`.
    pub fn lr(&self, step: u64) -> Result<f64, ScheduleError> {
        match self.kind {
            ScheduleKind::Isr => isr_lr(step, self),
            ScheduleKind::Cosine => Ok(cosine_lr(step, self)),
            ScheduleKind::Constant => Ok(constant_lr(step, self)),
        }
    }
}

/// `peak_lr / sqrt(max(step, warmup_steps))`.
pub fn isr_lr(step: u64, spec: &ScheduleSpec) -> Result<f64, ScheduleError> {
    let s = step.max(spec.warmup_steps);
    if s == 0 {
        return Err(ScheduleError::ZeroStep);
    }
    Ok(spec.peak_lr / (s as f64).sqrt())
}

fn warmup(step: u64, spec: &ScheduleSpec) -> Option<f64> {
    (step < spec.warmup_steps).then(|| spec.peak_lr * step as f64 / spec.warmup_steps as f64)
}

/// Linear warmup to `peak_lr`, then half a cosine down to `final_lr` at
/// `total_steps`; later steps stay at `final_lr`.
pub fn cosine_lr(step: u64, spec: &ScheduleSpec) -> f64 {
    if let Some(lr) = warmup(step, spec) {
        return lr;
    }
    let fin = spec.final_lr();
    if step >= spec.total_steps {
        return if spec.total_steps == spec.warmup_steps && step == spec.total_steps {
            spec.peak_lr
        } else {
            fin
        };
    }
    let progress = (step - spec.warmup_steps) as f64 / (spec.total_steps - spec.warmup_steps) as f64;
    fin + 0.5 * (spec.peak_lr - fin) * (1.0 + (PI * progress).cos())
}

/// Linear warmup, then `peak_lr` forever.
pub fn constant_lr(step: u64, spec: &ScheduleSpec) -> f64 {
    warmup(step, spec).unwrap_or(spec.peak_lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ScheduleKind) -> ScheduleSpec {
        ScheduleSpec {
            kind,
            peak_lr: 1.0,
            final_lr: Some(0.1),
            warmup_steps: 100,
            total_steps: 1000,
        }
    }

    #[test]
    fn isr_examples() {
        let s = ScheduleSpec::default();
        assert_eq!(isr_lr(0, &s).unwrap(), 0.01);
        assert_eq!(isr_lr(10_000, &s).unwrap(), 0.01);
        assert_eq!(isr_lr(65_536, &s).unwrap(), 1.0 / 256.0);
        let none = ScheduleSpec {
            warmup_steps: 0,
            ..s
        };
        assert_eq!(isr_lr(0, &none), Err(ScheduleError::ZeroStep));
    }

    #[test]
    fn cosine_examples() {
        let s = spec(ScheduleKind::Cosine);
        assert_eq!(cosine_lr(100, &s), 1.0);
        assert!((cosine_lr(1000, &s) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(550, &s) - 0.55).abs() < 1e-12);
        assert_eq!(cosine_lr(5000, &s), 0.1);
    }

    #[test]
    fn constant_examples() {
        let s = spec(ScheduleKind::Constant);
        assert_eq!(constant_lr(0, &s), 0.0);
        assert_eq!(constant_lr(100, &s), 1.0);
        assert_eq!(constant_lr(2000, &s), 1.0);
    }

    #[test]
    fn default_final_is_a_twentieth() {
        let s = ScheduleSpec {
            peak_lr: 0.02,
            final_lr: None,
            ..ScheduleSpec::default()
        };
        assert_eq!(s.final_lr(), 0.001);
    }
}
