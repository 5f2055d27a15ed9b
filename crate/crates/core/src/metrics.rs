//! Policy evaluation by simulation with frozen routing.
//!
//! The chain itself only tracks queue counts, so individual jobs are followed
//! with a FIFO list of arrival times per queue. Two system-time estimates come
//! out of one run: the per-job mean over departures inside the measurement
//! window, and Little's law `L / λ` from the time-averaged total queue.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Router;
use crate::queue_sim::{step, Event, QueueState, SystemConfig};

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_system_time_per_job: f64,
    pub avg_system_time_little: f64,
    pub time_avg_total_queue: f64,
    pub throughput: f64,
    pub sim_duration: f64,
    pub jobs_completed: u64,
    pub jobs_arrived: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum EvalOutcome {
    Stable(EvalReport),
    Unstable { time: f64, max_queue: u32 },
}

impl EvalOutcome {
    pub fn report(&self) -> Option<&EvalReport> {
        match self {
            EvalOutcome::Stable(r) => Some(r),
            EvalOutcome::Unstable { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JobTag {
    pub arrival_time: f64,
    pub server: usize,
}

/// Simulates `duration` seconds from the empty system, discarding the first
/// `warmup` seconds from every average. `jobs_completed` and `jobs_arrived`
/// count the whole run.
pub fn evaluate_policy<R: Rng + ?Sized>(
    router: &Router,
    cfg: &SystemConfig,
    duration: f64,
    warmup: f64,
    safety_cap: u32,
    rng: &mut R,
) -> Result<EvalOutcome> {
    if !(warmup >= 0.0 && duration > warmup && duration.is_finite()) {
        return Err(Error::EmptyWindow { duration, warmup });
    }
    let n = cfg.server_count();
    let mut x = QueueState::zeros(n);
    let mut queues: Vec<VecDeque<JobTag>> = vec![VecDeque::new(); n];
    let mut t = 0.0;
    let mut area = 0.0;
    let (mut arrived, mut completed) = (0u64, 0u64);
    let (mut window_departures, mut window_sojourn) = (0u64, 0.0);

    while t < duration {
        let a = router.route(&x, rng);
        let jump = step(&x, a, cfg, rng);
        let t_next = t + jump.holding_time;
        let lo = t.max(warmup);
        let hi = t_next.min(duration);
        if hi > lo {
            area += x.total() as f64 * (hi - lo);
        }
        if t_next >= duration {
            break;
        }
        match jump.event {
            Event::Arrival => {
                queues[a].push_back(JobTag {
                    arrival_time: t_next,
                    server: a,
                });
                arrived += 1;
            }
            Event::Departure(s) => {
                let job = queues[s].pop_front().expect("departure from an empty queue");
                completed += 1;
                if t_next >= warmup {
                    window_departures += 1;
                    window_sojourn += t_next - job.arrival_time;
                }
            }
        }
        t = t_next;
        x = jump.next_state;
        debug_assert_eq!(completed + x.total(), arrived);
        let max_queue = x.max_len();
        if max_queue > safety_cap {
            return Ok(EvalOutcome::Unstable { time: t, max_queue });
        }
    }

    let window = duration - warmup;
    let time_avg_total_queue = area / window;
    let per_job = if window_departures > 0 {
        window_sojourn / window_departures as f64
    } else {
        0.0
    };
    Ok(EvalOutcome::Stable(EvalReport {
        avg_system_time_per_job: per_job,
        avg_system_time_little: time_avg_total_queue / cfg.arrival_rate(),
        time_avg_total_queue,
        throughput: window_departures as f64 / window,
        sim_duration: duration,
        jobs_completed: completed,
        jobs_arrived: arrived,
    }))
}

/// Independent evaluations, one ChaCha stream per seed, run in parallel and
/// returned in seed order.
pub fn evaluate_replications(
    router: &Router,
    cfg: &SystemConfig,
    duration: f64,
    warmup: f64,
    safety_cap: u32,
    seeds: &[u64],
) -> Result<Vec<EvalOutcome>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            evaluate_policy(router, cfg, duration, warmup, safety_cap, &mut rng)
        })
        .collect()
}

/// Each policy's per-job system time divided by the baseline's.
pub fn normalize_report(reports: &BTreeMap<String, EvalReport>, baseline: &str) -> Result<BTreeMap<String, f64>> {
    let base = reports
        .get(baseline)
        .ok_or_else(|| Error::MissingBaseline(baseline.to_string()))?
        .avg_system_time_per_job;
    if !(base > 0.0) {
        return Err(Error::ZeroBaseline(baseline.to_string()));
    }
    Ok(reports
        .iter()
        .map(|(k, r)| (k.clone(), r.avg_system_time_per_job / base))
        .collect())
}
