//! Age labels as discretized Gaussian distributions over `K` integer bins.
//!
//! An integer age `y` becomes the vector `q[k] ∝ exp(-(k - y)² / 2σ²)` for
//! `k = 0..K-1`, renormalized to sum to one. A predicted distribution is
//! decoded back to a real age by its expectation `Σ k·p[k]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sum tolerance accepted by [`decode_expectation`].
pub const DECODE_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelCodecConfig {
    pub num_classes: usize,
    pub sigma: f64,
}

impl Default for LabelCodecConfig {
    fn default() -> Self {
        Self {
            num_classes: 101,
            sigma: 2.0,
        }
    }
}

impl LabelCodecConfig {
    pub fn new(num_classes: usize, sigma: f64) -> Result<Self> {
        let cfg = Self { num_classes, sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn max_age(&self) -> usize {
        self.num_classes - 1
    }

    pub fn check_age(&self, age: i64) -> Result<usize> {
        if age < 0 || age as usize > self.max_age() {
            return Err(Error::AgeOutOfRange {
                age,
                max: self.max_age(),
            });
        }
        Ok(age as usize)
    }
}

/// A probability vector over the `K` age bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgeDistribution(Vec<f64>);

impl AgeDistribution {
    /// Wraps `probs` after checking non-negativity and normalization.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("age distribution"));
        }
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::NonFinite(format!(
                "probability {bad} is negative or non-finite"
            )));
        }
        check_normalized(&probs)?;
        Ok(Self(probs))
    }

    /// Caller guarantees the invariants (softmax output, averaged softmax outputs).
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn one_hot(num_classes: usize, index: usize) -> Self {
        let mut p = vec![0.0; num_classes];
        p[index] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn expectation(&self) -> f64 {
        expectation(&self.0)
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| {
                if p > best.1 {
                    (k, p)
                } else {
                    best
                }
            })
            .0
    }

    /// Elementwise mean of two distributions over the same bins.
    pub fn average(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Shape {
                context: "distribution average",
                expected: format!("{} bins", self.len()),
                actual: format!("{} bins", other.len()),
            });
        }
        // (a + b) * 0.5 is commutative bit for bit.
        Ok(Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (a + b) * 0.5)
                .collect(),
        ))
    }
}

fn check_normalized(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > DECODE_SUM_TOLERANCE {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// `Σ k·p[k]`, accumulated as offsets from the mode with mirrored terms
/// paired, small offsets last. Symmetric distributions decode exactly.
fn expectation(probs: &[f64]) -> f64 {
    let m = probs
        .iter()
        .enumerate()
        .fold(0, |best, (k, &p)| if p > probs[best] { k } else { best });
    let reach = m.max(probs.len() - 1 - m);
    let mut acc = 0.0;
    for d in (1..=reach).rev() {
        let above = probs.get(m + d).copied().unwrap_or(0.0);
        let below = if d <= m { probs[m - d] } else { 0.0 };
        acc += d as f64 * (above - below);
    }
    m as f64 + acc
}

/// Encodes an integer age as a renormalized discrete Gaussian.
pub fn encode_label(age: i64, cfg: &LabelCodecConfig) -> Result<AgeDistribution> {
    cfg.validate()?;
    let y = cfg.check_age(age)? as f64;
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    let mut probs: Vec<f64> = (0..cfg.num_classes)
        .map(|k| {
            let d = k as f64 - y;
            (-d * d / denom).exp()
        })
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(AgeDistribution(probs))
}

/// Expected age `Σ k·p[k]` of a raw probability vector.
pub fn decode_expectation(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("age distribution"));
    }
    check_normalized(probs)?;
    Ok(expectation(probs))
}

/// Manifests may carry fractional ages; labels are integers.
pub fn round_age(age: f64) -> i64 {
    age.round() as i64
}
