//! Per-step training schedules: cosine interpolation for learning rate,
//! weight decay and teacher momentum, linear warmup for the learning rate
//! and the teacher temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine interpolation from `start` (step 0) to `end` (step `total`).
/// Endpoints are returned exactly, not through the cosine formula.
pub fn cosine_schedule(step: u64, total: u64, start: f64, end: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::domain("cosine_schedule: total must be > 0"));
    }
    if step > total {
        return Err(Error::range(format!(
            "cosine_schedule: step {step} out of range 0..={total}"
        )));
    }
    if step == 0 {
        return Ok(start);
    }
    if step == total {
        return Ok(end);
    }
    let t = step as f64 / total as f64;
    Ok(start + 0.5 * (end - start) * (1.0 - (std::f64::consts::PI * t).cos()))
}

/// All per-step scalar schedules of a pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    pub teacher_momentum_start: f64,
    pub teacher_momentum_end: f64,
    pub teacher_temp_warmup: f64,
    pub teacher_temp_final: f64,
    pub warmup_steps: u64,
    pub teacher_temp_warmup_steps: u64,
    pub total_steps: u64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("schedule: total_steps must be > 0"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("schedule: warmup longer than run"));
        }
        if self.teacher_temp_warmup <= 0.0 || self.teacher_temp_final <= 0.0 {
            return Err(Error::domain("schedule: temperatures must be positive"));
        }
        Ok(())
    }

    /// Linear warmup 0 -> base_lr, then cosine base_lr -> min_lr.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let total = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let s = (step - self.warmup_steps).min(total);
        cosine_schedule(s, total, self.base_lr, self.min_lr).expect("lr schedule")
    }

    pub fn weight_decay(&self, step: u64) -> f64 {
        cosine_schedule(
            step.min(self.total_steps),
            self.total_steps,
            self.weight_decay_start,
            self.weight_decay_end,
        )
        .expect("wd schedule")
    }

    pub fn teacher_momentum(&self, step: u64) -> f64 {
        cosine_schedule(
            step.min(self.total_steps),
            self.total_steps,
            self.teacher_momentum_start,
            self.teacher_momentum_end,
        )
        .expect("momentum schedule")
    }

    /// Linear warmup temperature, constant after `teacher_temp_warmup_steps`.
    pub fn teacher_temp(&self, step: u64) -> f64 {
        if self.teacher_temp_warmup_steps == 0 || step >= self.teacher_temp_warmup_steps {
            return self.teacher_temp_final;
        }
        let t = step as f64 / self.teacher_temp_warmup_steps as f64;
        self.teacher_temp_warmup + (self.teacher_temp_final - self.teacher_temp_warmup) * t
    }
}
