//! Monte-Carlo Foster–Lyapunov diagnostics.
//!
//! Two candidate functions are built from the approximation weights:
//! the quadratic `V̂_w(x) = Σ w_n x_n²` and the exponential
//! `W(x) = Σ exp(ν w_n (2x_n + 1)) / w_n`. For the quadratic one the drift is
//! the continuous-time generator, recovered from the jump chain as
//! `E[R(x)·(V(x′) − V(x))]` with `R` the total event rate. For the exponential
//! one it is the embedded-chain drift `E[W(x′) − W(x)]`.
//!
//! Everything here certifies only the states actually tested.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{state_value, WeightVector};
use crate::error::{Error, Result};
use crate::policy::Router;
use crate::queue_sim::{step, total_rate, QueueState, SystemConfig};

pub const DEFAULT_NU: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LyapunovSpec {
    QuadraticWeighted { weights: WeightVector },
    ExponentialWeighted { weights: WeightVector, nu: f64 },
}

impl LyapunovSpec {
    pub fn quadratic(weights: WeightVector) -> Self {
        LyapunovSpec::QuadraticWeighted { weights }
    }

    pub fn exponential(weights: WeightVector, nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidConfig(format!("nu must be positive, got {nu}")));
        }
        Ok(LyapunovSpec::ExponentialWeighted { weights, nu })
    }

    pub fn weights(&self) -> &WeightVector {
        match self {
            LyapunovSpec::QuadraticWeighted { weights } | LyapunovSpec::ExponentialWeighted { weights, .. } => weights,
        }
    }
}

/// A function value, in log-domain when it does not fit in an `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LyapunovValue {
    Linear(f64),
    Log(f64),
}

impl LyapunovValue {
    /// Linear value, `+∞` if only the log is representable.
    pub fn linear(self) -> f64 {
        match self {
            LyapunovValue::Linear(v) => v,
            LyapunovValue::Log(_) => f64::INFINITY,
        }
    }

    pub fn ln(self) -> f64 {
        match self {
            LyapunovValue::Linear(v) => v.ln(),
            LyapunovValue::Log(l) => l,
        }
    }
}

pub fn lyapunov_value(spec: &LyapunovSpec, x: &QueueState) -> LyapunovValue {
    match spec {
        LyapunovSpec::QuadraticWeighted { weights } => LyapunovValue::Linear(state_value(x, weights)),
        LyapunovSpec::ExponentialWeighted { weights, nu } => {
            let logs: Vec<f64> = x
                .lengths()
                .iter()
                .zip(weights.as_slice())
                .map(|(&len, &w)| nu * w * (2.0 * f64::from(len) + 1.0) - w.ln())
                .collect();
            let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = hi + logs.iter().map(|l| (l - hi).exp()).sum::<f64>().ln();
            let linear = lse.exp();
            if linear.is_finite() {
                LyapunovValue::Linear(logs.iter().map(|l| l.exp()).sum())
            } else {
                LyapunovValue::Log(lse)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub state: QueueState,
    pub mean_drift: f64,
    pub std_error: f64,
    pub samples: u64,
}

impl DriftEstimate {
    /// How many standard errors the mean lies below zero.
    pub fn z_below_zero(&self) -> f64 {
        if self.std_error > 0.0 {
            -self.mean_drift / self.std_error
        } else if self.mean_drift < 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// One-step drift of `spec` at `x` under `router`, averaged over `samples`
/// independent transitions.
pub fn estimate_drift<R: Rng + ?Sized>(
    spec: &LyapunovSpec,
    x: &QueueState,
    router: &Router,
    cfg: &SystemConfig,
    samples: u64,
    rng: &mut R,
) -> DriftEstimate {
    assert!(samples >= 1, "need at least one sample");
    let here = lyapunov_value(spec, x).linear();
    let rate = total_rate(x, cfg);
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..samples {
        let a = router.route(x, rng);
        let next = step(x, a, cfg, rng).next_state;
        let diff = lyapunov_value(spec, &next).linear() - here;
        let d = match spec {
            LyapunovSpec::QuadraticWeighted { .. } => rate * diff,
            LyapunovSpec::ExponentialWeighted { .. } => diff,
        };
        // Welford
        let delta = d - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (d - mean);
    }
    let std_error = if samples > 1 {
        (m2 / (samples - 1) as f64).sqrt() / (samples as f64).sqrt()
    } else {
        0.0
    };
    DriftEstimate {
        state: x.clone(),
        mean_drift: mean,
        std_error,
        samples,
    }
}

/// Drift at every state, in parallel. State `i` uses stream `i` of a ChaCha
/// generator seeded with `seed`, so the result is independent of scheduling.
pub fn estimate_drifts(
    spec: &LyapunovSpec,
    states: &[QueueState],
    router: &Router,
    cfg: &SystemConfig,
    samples: u64,
    seed: u64,
) -> Vec<DriftEstimate> {
    states
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            estimate_drift(spec, x, router, cfg, samples, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFit {
    /// Fitted `ε̂` in `drift ≈ −ε̂·Σ w_n x_n + B̂`.
    pub epsilon: f64,
    pub bound: f64,
    pub max_abs_residual: f64,
    pub estimates: Vec<DriftEstimate>,
}

/// Ordinary least squares of the estimated drift on `Σ w_n x_n`.
pub fn fit_drift_bound(
    spec: &LyapunovSpec,
    router: &Router,
    cfg: &SystemConfig,
    states: &[QueueState],
    samples: u64,
    seed: u64,
) -> Result<DriftFit> {
    if states.is_empty() {
        return Err(Error::EmptyStateSet);
    }
    let w = spec.weights();
    let regressor = |x: &QueueState| -> f64 {
        x.lengths().iter().zip(w.as_slice()).map(|(&l, w)| w * f64::from(l)).sum()
    };
    let f: Vec<f64> = states.iter().map(regressor).collect();
    let n = f.len() as f64;
    let f_mean = f.iter().sum::<f64>() / n;
    let sxx: f64 = f.iter().map(|v| (v - f_mean).powi(2)).sum();
    if sxx <= 1e-12 * (1.0 + f_mean * f_mean) * n {
        return Err(Error::DegenerateFit);
    }
    let estimates = estimate_drifts(spec, states, router, cfg, samples, seed);
    let d: Vec<f64> = estimates.iter().map(|e| e.mean_drift).collect();
    let d_mean = d.iter().sum::<f64>() / n;
    let sxy: f64 = f.iter().zip(&d).map(|(x, y)| (x - f_mean) * (y - d_mean)).sum();
    let slope = sxy / sxx;
    let intercept = d_mean - slope * f_mean;
    let max_abs_residual = f
        .iter()
        .zip(&d)
        .map(|(x, y)| (y - (slope * x + intercept)).abs())
        .fold(0.0, f64::max);
    Ok(DriftFit {
        epsilon: -slope,
        bound: intercept,
        max_abs_residual,
        estimates,
    })
}

/// States `(m, …, m)` for `m` in `range`.
pub fn ray_states(servers: usize, range: std::ops::RangeInclusive<u32>) -> Vec<QueueState> {
    range.map(|m| QueueState::new(vec![m; servers])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::JsqTieBreak;

    fn qs(v: &[u32]) -> QueueState {
        QueueState::new(v.to_vec())
    }

    fn w(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    fn learned() -> WeightVector {
        w(&[0.60, 0.49, 0.15])
    }

    fn reference() -> SystemConfig {
        SystemConfig::new(2.0, vec![0.5, 2.5, 5.0]).unwrap()
    }

    fn wsq(weights: WeightVector) -> Router {
        Router::WsqSoftmax { weights, temperature: 0.01 }
    }

    #[test]
    fn quadratic_values() {
        let spec = LyapunovSpec::quadratic(learned());
        assert_eq!(lyapunov_value(&spec, &qs(&[0, 0, 0])), LyapunovValue::Linear(0.0));
        let v = lyapunov_value(&spec, &qs(&[1, 2, 3])).linear();
        assert!((v - 3.91).abs() < 1e-12);
    }

    #[test]
    fn exponential_values() {
        let spec = LyapunovSpec::exponential(w(&[1.0, 1.0, 1.0]), 0.1).unwrap();
        let v = lyapunov_value(&spec, &qs(&[0, 0, 0])).linear();
        assert!((v - 3.0 * 0.1f64.exp()).abs() < 1e-12);
        assert!((v - 3.3155).abs() < 1e-4);
        assert!(LyapunovSpec::exponential(learned(), 0.0).is_err());
    }

    #[test]
    fn exponential_overflow_goes_to_log_domain() {
        let spec = LyapunovSpec::exponential(w(&[1.0, 1.0]), 1.0).unwrap();
        let v = lyapunov_value(&spec, &qs(&[1000, 0]));
        match v {
            LyapunovValue::Log(l) => assert!((l - 2001.0).abs() < 1e-9),
            other => panic!("expected log domain, got {other:?}"),
        }
        assert_eq!(v.linear(), f64::INFINITY);
    }

    #[test]
    fn quadratic_permutation_invariance() {
        let a = LyapunovSpec::quadratic(w(&[0.6, 0.49, 0.15]));
        let b = LyapunovSpec::quadratic(w(&[0.15, 0.6, 0.49]));
        let va = lyapunov_value(&a, &qs(&[4, 7, 2])).linear();
        let vb = lyapunov_value(&b, &qs(&[2, 4, 7])).linear();
        assert!((va - vb).abs() < 1e-12);
    }

    #[test]
    fn origin_drift_is_positive() {
        let spec = LyapunovSpec::quadratic(learned());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = estimate_drift(&spec, &qs(&[0, 0, 0]), &wsq(learned()), &reference(), 2000, &mut rng);
        assert!(est.mean_drift > 0.0);
        // only arrivals, all routed to server 3 (zero-based 2): R·w_3 = 2·0.15
        assert!((est.mean_drift - 0.3).abs() < 1e-9);
    }

    #[test]
    fn large_states_have_negative_drift_when_stabilizable() {
        let spec = LyapunovSpec::quadratic(learned());
        let states = [qs(&[10, 10, 10]), qs(&[30, 0, 0]), qs(&[0, 30, 0]), qs(&[0, 0, 30]), qs(&[12, 9, 20])];
        let est = estimate_drifts(&spec, &states, &wsq(learned()), &reference(), 4000, 3);
        for e in est {
            assert!(e.z_below_zero() >= 3.0, "{e:?}");
        }
    }

    #[test]
    fn unstabilizable_drift_is_positive() {
        let spec = LyapunovSpec::quadratic(learned());
        let cfg = SystemConfig::new(20.0, vec![0.5, 2.5, 5.0]).unwrap();
        let states = ray_states(3, 10..=40);
        for e in estimate_drifts(&spec, &states, &wsq(learned()), &cfg, 2000, 4) {
            assert!(e.mean_drift > 0.0, "{e:?}");
        }
    }

    #[test]
    fn std_error_shrinks_like_inverse_sqrt() {
        let spec = LyapunovSpec::quadratic(learned());
        let router = Router::Jsq(JsqTieBreak::Uniform);
        let x = qs(&[5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = estimate_drift(&spec, &x, &router, &reference(), 20_000, &mut rng);
        let b = estimate_drift(&spec, &x, &router, &reference(), 40_000, &mut rng);
        let ratio = b.std_error / a.std_error;
        assert!((0.6..=0.85).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn fit_on_ray() {
        let spec = LyapunovSpec::quadratic(learned());
        let states = ray_states(3, 0..=50);
        let fit = fit_drift_bound(&spec, &wsq(learned()), &reference(), &states, 500, 6).unwrap();
        assert!(fit.epsilon > 0.0, "{fit:?}");
        let cfg = SystemConfig::new(20.0, vec![0.5, 2.5, 5.0]).unwrap();
        let fit = fit_drift_bound(&spec, &wsq(learned()), &cfg, &states, 500, 6).unwrap();
        assert!(fit.epsilon <= 0.0);
    }

    #[test]
    fn degenerate_and_empty_fits_are_rejected() {
        let spec = LyapunovSpec::quadratic(learned());
        let same = vec![qs(&[3, 3, 3]); 5];
        assert!(matches!(
            fit_drift_bound(&spec, &wsq(learned()), &reference(), &same, 10, 0),
            Err(Error::DegenerateFit)
        ));
        assert!(matches!(
            fit_drift_bound(&spec, &wsq(learned()), &reference(), &[], 10, 0),
            Err(Error::EmptyStateSet)
        ));
    }

    #[test]
    fn parallel_estimates_are_deterministic() {
        let spec = LyapunovSpec::quadratic(learned());
        let states = ray_states(3, 0..=20);
        let a = estimate_drifts(&spec, &states, &wsq(learned()), &reference(), 100, 9);
        let b = estimate_drifts(&spec, &states, &wsq(learned()), &reference(), 100, 9);
        assert_eq!(a, b);
    }
}
