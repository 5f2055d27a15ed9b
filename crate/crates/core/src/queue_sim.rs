//! Parallel exponential servers observed at their transition epochs.
//!
//! Jobs arrive as a Poisson stream of rate `λ` and are routed to one of `N`
//! servers, each with its own FIFO queue and exponential service of rate
//! `μ_n`. Between epochs the total event rate is `λ + Σ μ_n·1{x_n > 0}`, so
//! the embedded jump chain is sampled by drawing one exponential holding time
//! and then picking the event in proportion to its rate.
//!
//! Server indices are zero-based throughout the crate.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The physical system: arrival rate and per-server service rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSystem", into = "RawSystem")]
pub struct SystemConfig {
    arrival_rate: f64,
    service_rates: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    arrival_rate: f64,
    service_rates: Vec<f64>,
}

impl TryFrom<RawSystem> for SystemConfig {
    type Error = Error;

    fn try_from(raw: RawSystem) -> Result<Self> {
        SystemConfig::new(raw.arrival_rate, raw.service_rates)
    }
}

impl From<SystemConfig> for RawSystem {
    fn from(cfg: SystemConfig) -> Self {
        RawSystem {
            arrival_rate: cfg.arrival_rate,
            service_rates: cfg.service_rates,
        }
    }
}

impl SystemConfig {
    pub fn new(arrival_rate: f64, service_rates: Vec<f64>) -> Result<Self> {
        if !(arrival_rate.is_finite() && arrival_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "arrival_rate must be a positive finite number, got {arrival_rate}"
            )));
        }
        if service_rates.is_empty() {
            return Err(Error::InvalidConfig("service_rates must not be empty".into()));
        }
        if let Some(bad) = service_rates.iter().find(|mu| !(mu.is_finite() && **mu > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "every service rate must be positive and finite, got {bad}"
            )));
        }
        Ok(SystemConfig {
            arrival_rate,
            service_rates,
        })
    }

    pub fn arrival_rate(&self) -> f64 {
        self.arrival_rate
    }

    pub fn service_rates(&self) -> &[f64] {
        &self.service_rates
    }

    pub fn server_count(&self) -> usize {
        self.service_rates.len()
    }

    /// Total service capacity `Σ μ_n`.
    pub fn capacity(&self) -> f64 {
        self.service_rates.iter().sum()
    }
}

/// Standalone system file: `{"arrival_rate": .., "service_rates": [..], "seed": ..}`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    arrival_rate: f64,
    service_rates: Vec<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Reads a system description and its optional seed from a JSON file.
pub fn load_system(path: impl AsRef<Path>) -> Result<(SystemConfig, Option<u64>)> {
    let text = std::fs::read_to_string(path)?;
    parse_system(&text)
}

pub fn parse_system(text: &str) -> Result<(SystemConfig, Option<u64>)> {
    let file: SystemFile = serde_json::from_str(text)?;
    let cfg = SystemConfig::new(file.arrival_rate, file.service_rates)?;
    Ok((cfg, file.seed))
}

/// True iff `λ < Σ μ_n`.
pub fn is_stabilizable(cfg: &SystemConfig) -> bool {
    cfg.arrival_rate < cfg.capacity()
}

/// Queue lengths, one per server.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueueState(Vec<u32>);

impl QueueState {
    pub fn zeros(n: usize) -> Self {
        QueueState(vec![0; n])
    }

    pub fn new(lengths: Vec<u32>) -> Self {
        QueueState(lengths)
    }

    /// Unit vector `e_i` of dimension `n`.
    pub fn unit(n: usize, i: usize) -> Self {
        let mut x = Self::zeros(n);
        x.0[i] = 1;
        x
    }

    pub fn lengths(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `‖x‖₁`, the number of jobs in the system.
    pub fn total(&self) -> u64 {
        self.0.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn max_len(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn increment(&mut self, i: usize) {
        self.0[i] = self.0[i]
            .checked_add(1)
            .expect("queue length overflowed u32");
    }

    pub fn decrement(&mut self, i: usize) {
        assert!(self.0[i] > 0, "departure from empty queue {i}");
        self.0[i] -= 1;
    }
}

impl From<Vec<u32>> for QueueState {
    fn from(v: Vec<u32>) -> Self {
        QueueState(v)
    }
}

impl fmt::Display for QueueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Arrival,
    Departure(usize),
}

/// Outcome of one embedded-chain step from a given `(x, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub next_state: QueueState,
    pub holding_time: f64,
    pub event: Event,
    /// `‖x′‖₁ · holding_time`.
    pub cost: f64,
}

/// One full SARSA transition `(x, a, x′, a′, Δt, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub state: QueueState,
    pub action: usize,
    pub next_state: QueueState,
    pub next_action: usize,
    pub holding_time: f64,
    pub cost: f64,
    pub event: Event,
}

impl TransitionRecord {
    pub fn from_jump(state: QueueState, action: usize, jump: Jump, next_action: usize) -> Self {
        TransitionRecord {
            state,
            action,
            next_state: jump.next_state,
            next_action,
            holding_time: jump.holding_time,
            cost: jump.cost,
            event: jump.event,
        }
    }
}

/// `λ + Σ_n μ_n·1{x_n > 0}`.
pub fn total_rate(x: &QueueState, cfg: &SystemConfig) -> f64 {
    cfg.arrival_rate
        + x.lengths()
            .iter()
            .zip(&cfg.service_rates)
            .filter(|(&len, _)| len > 0)
            .map(|(_, mu)| mu)
            .sum::<f64>()
}

/// One-step kernel `p(x′ | x, a)` of the embedded chain.
pub fn transition_prob(x: &QueueState, action: usize, next: &QueueState, cfg: &SystemConfig) -> f64 {
    assert!(action < cfg.server_count(), "action {action} out of range");
    if x.len() != next.len() {
        return 0.0;
    }
    let rate = total_rate(x, cfg);
    let mut diff = None;
    for (i, (&a, &b)) in x.lengths().iter().zip(next.lengths()).enumerate() {
        let d = i64::from(b) - i64::from(a);
        if d == 0 {
            continue;
        }
        if diff.is_some() || d.abs() != 1 {
            return 0.0;
        }
        diff = Some((i, d));
    }
    match diff {
        Some((i, 1)) if i == action => cfg.arrival_rate / rate,
        // x_i > 0 is implied by next_i = x_i - 1 >= 0
        Some((i, -1)) => cfg.service_rates[i] / rate,
        _ => 0.0,
    }
}

/// Exponential variate by inverse transform.
pub fn sample_exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

/// Samples the next epoch of the jump chain. Arrivals join queue `action`.
pub fn step<R: Rng + ?Sized>(x: &QueueState, action: usize, cfg: &SystemConfig, rng: &mut R) -> Jump {
    assert!(action < cfg.server_count(), "action {action} out of range");
    let rate = total_rate(x, cfg);
    let holding_time = sample_exponential(rate, rng);
    let event = sample_event(x, cfg, rate, rng);
    let mut next_state = x.clone();
    match event {
        Event::Arrival => next_state.increment(action),
        Event::Departure(n) => next_state.decrement(n),
    }
    let cost = next_state.total() as f64 * holding_time;
    Jump {
        next_state,
        holding_time,
        event,
        cost,
    }
}

fn sample_event<R: Rng + ?Sized>(x: &QueueState, cfg: &SystemConfig, rate: f64, rng: &mut R) -> Event {
    let mut u = rng.gen::<f64>() * rate;
    if u < cfg.arrival_rate {
        return Event::Arrival;
    }
    u -= cfg.arrival_rate;
    let mut last_busy = None;
    for (n, (&len, &mu)) in x.lengths().iter().zip(&cfg.service_rates).enumerate() {
        if len == 0 {
            continue;
        }
        if u < mu {
            return Event::Departure(n);
        }
        u -= mu;
        last_busy = Some(n);
    }
    // rounding can leave u a hair above the last busy server's share
    last_busy.map_or(Event::Arrival, Event::Departure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference() -> SystemConfig {
        SystemConfig::new(2.0, vec![0.5, 2.5, 5.0]).unwrap()
    }

    fn qs(v: &[u32]) -> QueueState {
        QueueState::new(v.to_vec())
    }

    #[test]
    fn total_rate_counts_busy_servers_only() {
        let cfg = reference();
        assert_eq!(total_rate(&qs(&[0, 0, 0]), &cfg), 2.0);
        assert_eq!(total_rate(&qs(&[1, 0, 1]), &cfg), 7.5);
        assert_eq!(total_rate(&qs(&[3, 3, 3]), &cfg), 10.0);
    }

    #[test]
    fn kernel_examples() {
        let cfg = reference();
        let p = transition_prob(&qs(&[1, 0, 0]), 1, &qs(&[1, 1, 0]), &cfg);
        assert!((p - 0.8).abs() < 1e-12);
        let p = transition_prob(&qs(&[1, 0, 0]), 1, &qs(&[0, 0, 0]), &cfg);
        assert!((p - 0.2).abs() < 1e-12);
        let p = transition_prob(&qs(&[0, 0, 0]), 2, &qs(&[0, 0, 1]), &cfg);
        assert_eq!(p, 1.0);
        // arrival to a queue other than the chosen one is impossible
        assert_eq!(transition_prob(&qs(&[0, 0, 0]), 2, &qs(&[1, 0, 0]), &cfg), 0.0);
        assert_eq!(transition_prob(&qs(&[0, 0, 0]), 2, &qs(&[0, 0, 0]), &cfg), 0.0);
        assert_eq!(transition_prob(&qs(&[2, 0, 0]), 0, &qs(&[0, 0, 0]), &cfg), 0.0);
    }

    #[test]
    fn stabilizability() {
        assert!(is_stabilizable(&reference()));
        let cfg = SystemConfig::new(8.0, vec![0.5, 2.5, 5.0]).unwrap();
        assert!(!is_stabilizable(&cfg));
        let cfg = SystemConfig::new(0.1, vec![0.2]).unwrap();
        assert!(is_stabilizable(&cfg));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SystemConfig::new(0.0, vec![1.0]).is_err());
        assert!(SystemConfig::new(1.0, vec![]).is_err());
        assert!(SystemConfig::new(1.0, vec![1.0, -2.0]).is_err());
        assert!(SystemConfig::new(f64::NAN, vec![1.0]).is_err());
    }

    #[test]
    fn parses_system_file() {
        let (cfg, seed) =
            parse_system(r#"{"arrival_rate": 2, "service_rates": [0.5, 2.5, 5], "seed": 7}"#).unwrap();
        assert_eq!(cfg, reference());
        assert_eq!(seed, Some(7));
        assert!(parse_system(r#"{"arrival_rate": 2, "service_rates": [], "seed": 7}"#).is_err());
        assert!(parse_system(r#"{"arrival_rate": 2, "service_rates": [1], "bogus": 1}"#).is_err());
    }

    #[test]
    fn origin_always_moves_to_chosen_queue() {
        let cfg = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in 0..3 {
            for _ in 0..100 {
                let j = step(&QueueState::zeros(3), a, &cfg, &mut rng);
                assert_eq!(j.next_state, QueueState::unit(3, a));
                assert_eq!(j.event, Event::Arrival);
            }
        }
    }

    #[test]
    fn arrival_frequency_matches_kernel() {
        let cfg = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = qs(&[1, 0, 0]);
        let n = 100_000;
        let arrivals = (0..n)
            .filter(|_| step(&x, 0, &cfg, &mut rng).event == Event::Arrival)
            .count();
        let freq = arrivals as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn holding_time_mean_is_inverse_rate() {
        let cfg = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = qs(&[5, 5, 5]);
        let n = 100_000;
        let mean = (0..n).map(|_| step(&x, 1, &cfg, &mut rng).holding_time).sum::<f64>() / n as f64;
        assert!((mean - 0.1).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn cost_is_post_jump_occupancy_times_holding_time() {
        let cfg = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = qs(&[2, 1, 0]);
        for _ in 0..1000 {
            let j = step(&x, 2, &cfg, &mut rng);
            assert!(j.cost >= 0.0);
            assert_eq!(j.cost, j.next_state.total() as f64 * j.holding_time);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn reachable(x: &QueueState, a: usize) -> Vec<QueueState> {
            let mut out = Vec::new();
            let mut up = x.clone();
            up.increment(a);
            out.push(up);
            for n in 0..x.len() {
                if x.lengths()[n] > 0 {
                    let mut down = x.clone();
                    down.decrement(n);
                    out.push(down);
                }
            }
            out
        }

        proptest! {
            #[test]
            fn kernel_sums_to_one(lengths in prop::collection::vec(0u32..20, 3), a in 0usize..3) {
                let cfg = reference();
                let x = QueueState::new(lengths);
                let total: f64 = reachable(&x, a).iter().map(|y| transition_prob(&x, a, y, &cfg)).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }

            #[test]
            fn step_moves_one_coordinate_by_one(
                lengths in prop::collection::vec(0u32..20, 3),
                a in 0usize..3,
                seed in any::<u64>(),
            ) {
                let cfg = reference();
                let x = QueueState::new(lengths);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let j = step(&x, a, &cfg, &mut rng);
                let changed: Vec<i64> = x.lengths().iter().zip(j.next_state.lengths())
                    .map(|(&p, &q)| i64::from(q) - i64::from(p))
                    .filter(|d| *d != 0)
                    .collect();
                prop_assert_eq!(changed.len(), 1);
                prop_assert_eq!(changed[0].abs(), 1);
                prop_assert!(transition_prob(&x, a, &j.next_state, &cfg) > 0.0);
            }
        }
    }
}
