//! Sparsity and learning-rate schedules.
//!
//! Sparsity follows the gradual-pruning cubic ramp: zero during warm-up,
//! p * (1 - (1 - tau)^3) across the ramp, then held at the target for
//! the cool-down tail so the network can recover at final sparsity.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySchedule {
    pub target_p: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub cooldown_frac: f64,
}

impl SparsitySchedule {
    pub fn new(
        target_p: f64,
        total_steps: usize,
        warmup_frac: f64,
        cooldown_frac: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&target_p) {
            return Err(Error::contract(format!(
                "target sparsity must lie in [0, 1], got {target_p}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        if warmup_frac < 0.0 || cooldown_frac < 0.0 || warmup_frac + cooldown_frac >= 1.0 {
            return Err(Error::contract(format!(
                "warmup_frac + cooldown_frac must stay below 1, got {warmup_frac} + {cooldown_frac}"
            )));
        }
        Ok(Self { target_p, total_steps, warmup_frac, cooldown_frac })
    }

    /// Scheduled sparsity at step t; monotone non-decreasing in t.
    pub fn sparsity_at(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::contract(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let total = self.total_steps as f64;
        let t_w = self.warmup_frac * total;
        let t_c = (1.0 - self.cooldown_frac) * total;
        let t = t as f64;
        if t < t_w {
            Ok(0.0)
        } else if t < t_c {
            let tau = (t - t_w) / (t_c - t_w);
            Ok(self.target_p * (1.0 - (1.0 - tau).powi(3)))
        } else {
            Ok(self.target_p)
        }
    }
}

/// Linear decay: base_lr * (1 - t / total).
pub fn lr_at(base_lr: f64, t: usize, total: usize) -> f64 {
    base_lr * (1.0 - t as f64 / total as f64)
}
