//! Consistency weight and learning-rate schedules.

use crate::config::TrainConfig;

/// Consistency weight at iteration `j` of `n`.
///
/// Ramps up as `exp(-5 (1 - 4j/N)^2)` over the first quarter, holds 1, and
/// ramps down over the last quarter as `exp(-12.5 (1 - 4(N-j)/N)^2)`, which
/// reaches `e^-12.5` at `j = N`. With `literal` the last branch uses the
/// factor 7 instead of 4; that curve jumps at `3N/4` and climbs back to 1 at
/// `6N/7`.
pub fn lambda_at(j: u64, n: u64, literal: bool) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let (jf, nf) = (j as f64, n as f64);
    if 4 * j < n {
        (-5.0 * (1.0 - 4.0 * jf / nf).powi(2)).exp()
    } else if 4 * j < 3 * n {
        1.0
    } else {
        let k = if literal { 7.0 } else { 4.0 };
        (-12.5 * (1.0 - k * (nf - jf) / nf).powi(2)).exp()
    }
}

/// The ramp over a fixed number of iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub total: u64,
    pub literal_rampdown: bool,
}

impl Schedule {
    pub fn lambda(&self, j: u64) -> f64 {
        lambda_at(j.min(self.total), self.total, self.literal_rampdown)
    }
}

/// First epoch trained at the dropped learning rate.
pub fn lr_drop_epoch(config: &TrainConfig) -> usize {
    (config.lr_drop_at * config.epochs as f64).round() as usize
}

pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= lr_drop_epoch(config) {
        config.lr * config.lr_drop_factor
    } else {
        config.lr
    }
}
