//! Per-example training loss: `KL(q ‖ p) + λ·|E[p] − y|`.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::codec::AgeDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the absolute expectation error.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub kl: f64,
    pub l1: f64,
}

/// KL divergence with `0·log(0/p) = 0`; errors when `q > 0` meets `p = 0`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Shape {
            context: "KL divergence",
            expected: format!("{} bins", q.len()),
            actual: format!("{} bins", p.len()),
        });
    }
    let mut kl = 0.0;
    for (k, (&qk, &pk)) in q.iter().zip(p).enumerate() {
        if qk > 0.0 {
            if pk <= 0.0 {
                return Err(Error::InfiniteKl { index: k });
            }
            kl += qk * (qk / pk).ln();
        }
    }
    Ok(kl)
}

pub fn loss(
    pred: &AgeDistribution,
    target: &AgeDistribution,
    age: i64,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let kl = kl_divergence(target.probs(), pred.probs())?;
    let l1 = (pred.expectation() - age as f64).abs();
    Ok(LossValue {
        total: kl + cfg.lambda * l1,
        kl,
        l1,
    })
}

/// Gradient of the total loss with respect to the logits that produced
/// `pred` through a softmax.
///
/// KL part: `p − q`. Expectation part: `∂ŷ/∂z_j = p_j (j − ŷ)`, times the
/// sign of `ŷ − y` (zero at the kink).
pub fn logit_gradient(pred: &[f64], target: &[f64], age: i64, cfg: &LossConfig) -> Array1<f64> {
    let expected: f64 = pred.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
    let diff = expected - age as f64;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    Array1::from_iter(pred.iter().zip(target).enumerate().map(|(j, (&p, &q))| {
        p - q + cfg.lambda * sign * p * (j as f64 - expected)
    }))
}
