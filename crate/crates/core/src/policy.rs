//! Routing policies.
//!
//! The learning policy is a softmax over `−Q̂(x, ·; w)/ι` (weighted shortest
//! queue, WSQ). Its greedy limit, join-the-shortest-queue and state-blind
//! Bernoulli splitting are provided as baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{marginal_cost, WeightVector};
use crate::error::{Error, Result};
use crate::nn_bench::MlpParams;
use crate::queue_sim::QueueState;

const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsqTieBreak {
    /// Uniformly random among the shortest queues.
    #[default]
    Uniform,
    /// Lowest-index shortest queue, as a plain `argmin` would return.
    LowestIndex,
}

/// Policy as written in an experiment config.
///
/// The learnable kinds (`wsq_softmax` and `nn`) may omit their parameters,
/// in which case they are obtained by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    WsqSoftmax {
        temperature: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<WeightVector>,
    },
    WsqGreedy {
        weights: WeightVector,
    },
    Jsq {
        #[serde(default)]
        tie_break: JsqTieBreak,
    },
    Bernoulli {
        probabilities: Vec<f64>,
    },
    Nn {
        temperature: f64,
    },
}

impl PolicySpec {
    pub fn validate(&self, servers: usize) -> Result<()> {
        match self {
            PolicySpec::WsqSoftmax { temperature, weights } => {
                check_temperature(*temperature)?;
                check_dim(weights.as_ref(), servers)
            }
            PolicySpec::WsqGreedy { weights } => check_dim(Some(weights), servers),
            PolicySpec::Jsq { .. } => Ok(()),
            PolicySpec::Bernoulli { probabilities } => {
                if probabilities.len() != servers {
                    return Err(Error::InvalidConfig(format!(
                        "bernoulli probabilities have length {}, expected {servers}",
                        probabilities.len()
                    )));
                }
                validate_probabilities(probabilities)
            }
            PolicySpec::Nn { temperature } => check_temperature(*temperature),
        }
    }

    /// Softmax temperature for the kinds that have one.
    pub fn temperature(&self) -> Option<f64> {
        match self {
            PolicySpec::WsqSoftmax { temperature, .. } | PolicySpec::Nn { temperature } => {
                Some(*temperature)
            }
            _ => None,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, PolicySpec::WsqSoftmax { .. } | PolicySpec::Nn { .. })
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")))
    }
}

fn check_dim(w: Option<&WeightVector>, servers: usize) -> Result<()> {
    match w {
        Some(w) if w.len() != servers => Err(Error::InvalidConfig(format!(
            "weights have length {}, expected {servers}",
            w.len()
        ))),
        _ => Ok(()),
    }
}

pub fn validate_probabilities(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::InvalidProbabilities { sum });
    }
    Ok(())
}

/// Fully parameterized policy, ready to route.
#[derive(Debug, Clone)]
pub enum Router {
    WsqSoftmax { weights: WeightVector, temperature: f64 },
    WsqGreedy { weights: WeightVector },
    Jsq(JsqTieBreak),
    Bernoulli(Vec<f64>),
    Nn { mlp: MlpParams, temperature: f64 },
}

impl Router {
    pub fn route<R: Rng + ?Sized>(&self, x: &QueueState, rng: &mut R) -> usize {
        match self {
            Router::WsqSoftmax { weights, temperature } => sample_wsq(x, weights, *temperature, rng),
            Router::WsqGreedy { weights } => wsq_greedy(x, weights),
            Router::Jsq(tie) => jsq(x, *tie, rng),
            Router::Bernoulli(p) => sample_categorical(p, rng),
            Router::Nn { mlp, temperature } => crate::nn_bench::nn_wsq_policy(mlp, x, *temperature, rng),
        }
    }

    /// Action distribution at `x`. JSQ with uniform ties and the greedy rule
    /// are returned as (degenerate) distributions too.
    pub fn action_probs(&self, x: &QueueState) -> Vec<f64> {
        match self {
            Router::WsqSoftmax { weights, temperature } => wsq_action_probs(x, weights, *temperature),
            Router::WsqGreedy { weights } => one_hot(x.len(), wsq_greedy(x, weights)),
            Router::Jsq(JsqTieBreak::LowestIndex) => one_hot(x.len(), argmin_lowest(x)),
            Router::Jsq(JsqTieBreak::Uniform) => {
                let m = x.lengths().iter().copied().min().unwrap_or(0);
                let ties = x.lengths().iter().filter(|&&v| v == m).count() as f64;
                x.lengths().iter().map(|&v| if v == m { 1.0 / ties } else { 0.0 }).collect()
            }
            Router::Bernoulli(p) => p.clone(),
            Router::Nn { mlp, temperature } => crate::nn_bench::nn_action_probs(mlp, x, *temperature),
        }
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// `exp(−q_a/ι) / Σ_b exp(−q_b/ι)`, shifted by `min q` so the largest
/// exponent is zero.
pub fn softmin(q: &[f64], temperature: f64) -> Vec<f64> {
    let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = q.iter().map(|v| (-(v - lo) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `π_w(· | x)`. Uses the marginal costs `w_a(2x_a+1)`, which differ from
/// `Q̂(x, a; w)` by the action-independent `V̂_w(x)`.
pub fn wsq_action_probs(x: &QueueState, w: &WeightVector, temperature: f64) -> Vec<f64> {
    let q: Vec<f64> = (0..x.len()).map(|a| marginal_cost(x, a, w)).collect();
    softmin(&q, temperature)
}

pub fn sample_wsq<R: Rng + ?Sized>(x: &QueueState, w: &WeightVector, temperature: f64, rng: &mut R) -> usize {
    sample_categorical(&wsq_action_probs(x, w, temperature), rng)
}

/// `argmin_a w_a(2x_a + 1)`, lowest index on ties.
pub fn wsq_greedy(x: &QueueState, w: &WeightVector) -> usize {
    let mut best = 0;
    let mut best_cost = marginal_cost(x, 0, w);
    for a in 1..x.len() {
        let c = marginal_cost(x, a, w);
        if c < best_cost {
            best = a;
            best_cost = c;
        }
    }
    best
}

pub fn jsq<R: Rng + ?Sized>(x: &QueueState, tie_break: JsqTieBreak, rng: &mut R) -> usize {
    match tie_break {
        JsqTieBreak::LowestIndex => argmin_lowest(x),
        JsqTieBreak::Uniform => {
            let m = x.lengths().iter().copied().min().expect("empty state");
            let ties: Vec<usize> = (0..x.len()).filter(|&n| x.lengths()[n] == m).collect();
            ties[rng.gen_range(0..ties.len())]
        }
    }
}

fn argmin_lowest(x: &QueueState) -> usize {
    let l = x.lengths();
    (0..l.len()).fold(0, |best, n| if l[n] < l[best] { n } else { best })
}

pub fn bernoulli_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    validate_probabilities(probs)?;
    Ok(sample_categorical(probs, rng))
}

/// Inverse-CDF draw; zero-probability entries are never returned.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
