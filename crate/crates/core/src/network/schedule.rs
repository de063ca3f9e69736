use serde::{Deserialize, Serialize};

/// Linear decay from `lr_start` to `lr_end` over `decay_epochs`, constant
/// afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_start: 3e-3,
            lr_end: 3e-4,
            decay_epochs: 500,
        }
    }
}

impl ScheduleConfig {
    pub fn is_valid(&self) -> bool {
        self.lr_end > 0.0 && self.lr_start >= self.lr_end
    }
}

pub fn lr_at(schedule: &ScheduleConfig, epoch: usize) -> f64 {
    if epoch >= schedule.decay_epochs {
        return schedule.lr_end;
    }
    let frac = epoch as f64 / schedule.decay_epochs as f64;
    schedule.lr_start + (schedule.lr_end - schedule.lr_start) * frac
}
