//! Noisy residual block: channel-gated Gaussian noise added to a feature
//! map through a residual connection.
//!
//! ```text
//! X^p = conv1x1(GAP(X^l))                      (per-channel, learnable)
//! X^q = X^n * sigmoid(gamma * X^p) + X^l        X^n ~ N(mu, sigma) over C x H x W
//! ```
//!
//! The noise map is a constant of each draw; gradients flow into `X^l` and
//! into the projection through the gate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoisyResidualGate {
    pub gamma: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl Default for NoisyResidualGate {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            mu: 0.0,
            sigma: 1.0,
        }
    }
}

impl NoisyResidualGate {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.sigma >= 0.0) || !self.mu.is_finite() {
            return Err(Error::config(format!(
                "noisy residual gate needs gamma > 0 and sigma >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Learnable 1x1 projection of the pooled features: `[C, C, 1, 1]` weight
/// and `[C]` bias, both graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GateProjection {
    pub weight: Var,
    pub bias: Var,
}

/// Applies the block to `xl` (`[C, H, W]`).
///
/// When `enabled` is false, or `sigma == 0`, the input node is returned
/// unchanged and nothing is drawn from `rng`.
pub fn nrb_apply<R: Rng + ?Sized>(
    g: &mut Graph,
    gate: &NoisyResidualGate,
    projection: GateProjection,
    xl: Var,
    rng: &mut R,
    enabled: bool,
) -> Result<Var> {
    if !enabled || gate.sigma == 0.0 {
        return Ok(xl);
    }
    let (c, h, w) = g.value(xl).dims3()?;
    let normal = Normal::new(gate.mu, gate.sigma)
        .map_err(|e| Error::config(format!("noise distribution: {e}")))?;
    let noise: Vec<f64> = (0..c * h * w).map(|_| normal.sample(rng)).collect();

    let pooled = g.global_avg_pool(xl)?;
    let xp = g.conv2d(pooled, projection.weight, Some(projection.bias), 1, 0)?;
    let scaled = g.scale(xp, gate.gamma);
    let gate_values = g.sigmoid(scaled);
    let gated = g.channel_gate(Tensor::new(vec![c, h, w], noise)?, gate_values)?;
    g.add(gated, xl)
}

/// Gate values `sigmoid(gamma * (W . GAP(x) + b))` for a plain feature map;
/// `weight` is row-major `[C, C]`.
pub fn gate_values(gate: &NoisyResidualGate, weight: &[f64], bias: &[f64], xl: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = xl.dims3()?;
    if weight.len() != c * c || bias.len() != c {
        return Err(Error::shape("gate projection does not match channel count"));
    }
    let pooled: Vec<f64> = xl
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
        .collect();
    Ok((0..c)
        .map(|o| {
            let z = bias[o] + (0..c).map(|i| weight[o * c + i] * pooled[i]).sum::<f64>();
            sigmoid(gate.gamma * z)
        })
        .collect())
}
