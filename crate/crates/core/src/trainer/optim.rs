use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::detector::{ModelWeights, WeightRole};
use crate::error::{Error, Result};

/// Teacher weights tracking the student by exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTracker {
    pub alpha: f64,
    pub teacher: ModelWeights,
}

impl EmaTracker {
    pub fn new(alpha: f64, teacher: ModelWeights) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("EMA alpha {alpha} outside [0, 1]")));
        }
        Ok(Self {
            alpha,
            teacher: teacher.with_role(WeightRole::Teacher),
        })
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student`.
    pub fn update(&mut self, student: &ModelWeights) -> Result<()> {
        self.teacher.check_same_layout(student)?;
        let a = self.alpha;
        for (t, s) in self.teacher.tensors_mut().iter_mut().zip(student.tensors()) {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = a * *tv + (1.0 - a) * sv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: &TrainConfig, num_params: usize) -> Self {
        Self {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One bias-corrected update of `weights` from a flat gradient.
    pub fn step(&mut self, weights: &mut ModelWeights, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.m.len() || weights.num_params() != grad.len() {
            return Err(Error::Layout(format!(
                "optimizer holds {} moments, gradient has {} entries, weights {}",
                self.m.len(),
                grad.len(),
                weights.num_params()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for t in weights.tensors_mut() {
            for w in t.data_mut() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
                i += 1;
            }
        }
        Ok(())
    }
}
