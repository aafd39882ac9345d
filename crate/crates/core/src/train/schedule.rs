use serde::{Deserialize, Serialize};

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// `floor` at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    /// Learning rate at `step`. `lr_at(0)` is 0 whenever there is a warmup,
    /// so the trainer applies `lr_at(k + 1)` on its k-th (0-based) update.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.base;
        }
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.floor + (self.base - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

pub fn lr_at(step: usize, schedule: &LrSchedule) -> f64 {
    schedule.lr_at(step)
}
