//! Quadratic linear approximation of the action-value function.
//!
//! `Q̂(x, a; w) = Σ_n w_n (x_n + 1{n = a})²`, i.e. the weighted squared queue
//! lengths after the routed job has joined queue `a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queue_sim::QueueState;

/// Strictly positive approximation weights, one per server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidConfig("weight vector must not be empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "weights must be positive and finite, got {w}"
            )));
        }
        Ok(WeightVector(weights))
    }

    /// Same weight on every server.
    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub(crate) fn from_raw_unchecked(weights: Vec<f64>) -> Self {
        debug_assert!(weights.iter().all(|w| *w > 0.0));
        WeightVector(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Feature map `φ(x, a)` of a linear approximator.
pub trait FeatureMap {
    fn features(&self, x: &QueueState, action: usize) -> Vec<f64>;
}

/// `φ_n(x, a) = (x_n + 1{n = a})²`. The only basis implemented.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticBasis;

impl FeatureMap for QuadraticBasis {
    fn features(&self, x: &QueueState, action: usize) -> Vec<f64> {
        features(x, action)
    }
}

pub fn features(x: &QueueState, action: usize) -> Vec<f64> {
    assert!(action < x.len(), "action {action} out of range");
    x.lengths()
        .iter()
        .enumerate()
        .map(|(n, &len)| {
            let v = f64::from(len) + if n == action { 1.0 } else { 0.0 };
            v * v
        })
        .collect()
}

/// `∇_w Q̂(x, a; w)`; the approximator is linear so this is `φ(x, a)`.
pub fn gradient(x: &QueueState, action: usize) -> Vec<f64> {
    features(x, action)
}

pub fn q_value(x: &QueueState, action: usize, w: &WeightVector) -> f64 {
    assert_eq!(x.len(), w.len(), "state and weight dimensions differ");
    features(x, action)
        .iter()
        .zip(w.as_slice())
        .map(|(phi, w)| phi * w)
        .sum()
}

/// `V̂_w(x) = Σ w_n x_n²`, the action-independent part of `Q̂`.
pub fn state_value(x: &QueueState, w: &WeightVector) -> f64 {
    x.lengths()
        .iter()
        .zip(w.as_slice())
        .map(|(&len, w)| w * f64::from(len) * f64::from(len))
        .sum()
}

/// `Q̂(x, a; w) − V̂_w(x) = w_a(2x_a + 1)`: the marginal cost of routing to `a`.
pub fn marginal_cost(x: &QueueState, action: usize, w: &WeightVector) -> f64 {
    w.as_slice()[action] * (2.0 * f64::from(x.lengths()[action]) + 1.0)
}
