//! Semi-gradient SARSA(0) with the quadratic approximator.
//!
//! Each epoch of the embedded chain yields a transition `(x, a, x′, a′, Δt, c)`
//! and the update
//!
//! ```text
//! Δ = −Q̂(x, a; w) + c + γ Q̂(x′, a′; w)
//! δ = Δ · φ(x, a)
//! w ← Γ(w + α δ)
//! ```
//!
//! where `Γ` is the projection onto the 2-norm ball of radius `C_Γ` (followed
//! by a small positivity floor) and `α` comes from a deterministic sequence
//! `a/(b + k̃)` that only advances when `‖δ‖₂ ≤ B_α`. A rejected step has
//! `α = 0` and leaves both the weights and `k̃` untouched.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{features, l2_norm, q_value, WeightVector};
use crate::error::{Error, Result};
use crate::policy::sample_wsq;
use crate::queue_sim::{step, QueueState, SystemConfig, TransitionRecord};

/// Gated step sizes `α̃_k̃ = scale / (offset + k̃)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeSchedule {
    scale: f64,
    offset: f64,
    gate_bound: f64,
    accepted: u64,
}

impl StepSizeSchedule {
    /// `gate_bound = f64::INFINITY` disables gating. `scale > 0` and
    /// `offset ≥ 1` keep `Σ α̃ = ∞` and `Σ α̃² < ∞`.
    pub fn new(scale: f64, offset: f64, gate_bound: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!("step scale must be positive, got {scale}")));
        }
        if !(offset.is_finite() && offset >= 1.0) {
            return Err(Error::InvalidConfig(format!("step offset must be at least 1, got {offset}")));
        }
        if !(gate_bound > 0.0) {
            return Err(Error::InvalidConfig(format!("gate bound must be positive, got {gate_bound}")));
        }
        Ok(StepSizeSchedule {
            scale,
            offset,
            gate_bound,
            accepted: 0,
        })
    }

    pub fn base(&self, k: u64) -> f64 {
        self.scale / (self.offset + k as f64)
    }

    pub fn accepted_count(&self) -> u64 {
        self.accepted
    }

    pub fn gate_bound(&self) -> f64 {
        self.gate_bound
    }

    /// Gate on `‖δ‖₂ ≤ B_α` (inclusive).
    pub fn accepts(&self, td: &TdVector) -> bool {
        td.norm() <= self.gate_bound
    }

    /// Issues `α̃_k̃` and advances `k̃` if `td` passes the gate, else `0`.
    pub fn next_step_size(&mut self, td: &TdVector) -> f64 {
        self.next_gated(self.accepts(td))
    }

    fn next_gated(&mut self, accepted: bool) -> f64 {
        if accepted {
            let alpha = self.base(self.accepted);
            self.accepted += 1;
            alpha
        } else {
            0.0
        }
    }
}

/// `δ = Δ · φ(x, a)` together with the scalar TD error `Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdVector {
    pub values: Vec<f64>,
    pub td_error: f64,
}

impl TdVector {
    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub fn td_vector(rec: &TransitionRecord, w: &WeightVector, discount: f64) -> TdVector {
    let td_error = -q_value(&rec.state, rec.action, w)
        + rec.cost
        + discount * q_value(&rec.next_state, rec.next_action, w);
    let values = features(&rec.state, rec.action)
        .into_iter()
        .map(|phi| td_error * phi)
        .collect();
    TdVector { values, td_error }
}

/// `Γ`: rescale into the ball of radius `radius`, then clamp every component
/// to at least `floor`.
pub fn project(raw: &[f64], radius: f64, floor: f64) -> WeightVector {
    assert!(radius > 0.0 && floor > 0.0);
    let norm = l2_norm(raw);
    let scale = if norm > radius { radius / norm } else { 1.0 };
    WeightVector::from_raw_unchecked(raw.iter().map(|w| (w * scale).max(floor)).collect())
}

/// Optional gates on the transition itself, applied before the norm gate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionGates {
    /// Reject updates from states with `‖x‖₁` above this.
    #[serde(default)]
    pub max_state_total: Option<u64>,
    /// Reject updates whose holding time exceeds this (seconds).
    #[serde(default)]
    pub max_holding_time: Option<f64>,
}

impl TransitionGates {
    fn admits(&self, rec: &TransitionRecord) -> bool {
        self.max_state_total.is_none_or(|m| rec.state.total() <= m)
            && self.max_holding_time.is_none_or(|m| rec.holding_time <= m)
    }
}

/// Learner hyperparameters as they appear in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerParams {
    pub initial_weights: Vec<f64>,
    pub discount: f64,
    pub projection_radius: f64,
    /// `null` or absent means no norm gate.
    #[serde(default)]
    pub gate_bound: Option<f64>,
    pub step_scale: f64,
    pub step_offset: f64,
    #[serde(default = "default_floor")]
    pub positivity_floor: f64,
    #[serde(default)]
    pub gates: TransitionGates,
}

fn default_floor() -> f64 {
    1e-6
}

impl LearnerParams {
    pub fn reference(servers: usize) -> Self {
        LearnerParams {
            initial_weights: vec![0.5; servers],
            discount: 0.95,
            projection_radius: 10.0,
            gate_bound: Some(20.0),
            step_scale: 0.5,
            step_offset: 1000.0,
            positivity_floor: 1e-6,
            gates: TransitionGates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub weights: WeightVector,
    pub schedule: StepSizeSchedule,
    pub discount: f64,
    pub projection_radius: f64,
    pub positivity_floor: f64,
    pub gates: TransitionGates,
    pub epoch: u64,
}

impl LearnerState {
    pub fn new(params: &LearnerParams) -> Result<Self> {
        let weights = WeightVector::new(params.initial_weights.clone())?;
        if !(params.discount > 0.0 && params.discount < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "discount must lie in (0, 1), got {}",
                params.discount
            )));
        }
        if !(params.projection_radius.is_finite() && params.projection_radius > 0.0) {
            return Err(Error::InvalidConfig("projection_radius must be positive".into()));
        }
        if !(params.positivity_floor > 0.0) {
            return Err(Error::InvalidConfig("positivity_floor must be positive".into()));
        }
        if weights.norm() >= params.projection_radius {
            return Err(Error::InvalidConfig(format!(
                "initial weights have norm {} which is not below projection_radius {}",
                weights.norm(),
                params.projection_radius
            )));
        }
        if weights.as_slice().iter().any(|w| *w < params.positivity_floor) {
            return Err(Error::InvalidConfig("initial weights lie below positivity_floor".into()));
        }
        let schedule = StepSizeSchedule::new(
            params.step_scale,
            params.step_offset,
            params.gate_bound.unwrap_or(f64::INFINITY),
        )?;
        Ok(LearnerState {
            weights,
            schedule,
            discount: params.discount,
            projection_radius: params.projection_radius,
            positivity_floor: params.positivity_floor,
            gates: params.gates,
            epoch: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub alpha: f64,
    pub td_error: f64,
}

/// One SARSA update on `learner` from `rec`.
pub fn sgs_step(learner: &mut LearnerState, rec: &TransitionRecord) -> StepOutcome {
    let td = td_vector(rec, &learner.weights, learner.discount);
    let admitted = learner.gates.admits(rec) && learner.schedule.accepts(&td);
    let alpha = learner.schedule.next_gated(admitted);
    if alpha != 0.0 {
        let raw: Vec<f64> = learner
            .weights
            .as_slice()
            .iter()
            .zip(&td.values)
            .map(|(w, d)| w + alpha * d)
            .collect();
        learner.weights = project(&raw, learner.projection_radius, learner.positivity_floor);
    }
    learner.epoch += 1;
    StepOutcome {
        alpha,
        td_error: td.td_error,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: u64,
    pub log_every: u64,
    /// Abort when any queue exceeds this length.
    pub safety_cap: u32,
    #[serde(default)]
    pub initial_state: Option<QueueState>,
}

/// Sampled point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: u64,
    pub weights: Vec<f64>,
    pub state: Vec<u32>,
    pub td_error: f64,
    pub alpha: f64,
    /// `Σ c[k+1]` so far.
    pub cumulative_cost: f64,
    /// Simulated seconds elapsed.
    pub sim_time: f64,
    /// `∫ ‖x(t)‖₁ dt` so far.
    pub queue_area: f64,
    pub accepted_steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut out: W, servers: usize) -> std::io::Result<()> {
        let mut header = vec!["epoch".to_string()];
        header.extend((1..=servers).map(|n| format!("w_{n}")));
        header.extend((1..=servers).map(|n| format!("x_{n}")));
        header.extend(
            ["td_error", "alpha", "cumulative_cost", "sim_time", "queue_area", "accepted_steps"]
                .map(String::from),
        );
        writeln!(out, "{}", header.join(","))?;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string()];
            row.extend(r.weights.iter().map(|w| w.to_string()));
            row.extend(r.state.iter().map(|x| x.to_string()));
            row.extend([
                r.td_error.to_string(),
                r.alpha.to_string(),
                r.cumulative_cost.to_string(),
                r.sim_time.to_string(),
                r.queue_area.to_string(),
                r.accepted_steps.to_string(),
            ]);
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Time-averaged `‖x‖₁` over the records with `epoch ≥ from_epoch`.
    pub fn time_average_queue_since(&self, from_epoch: u64) -> Option<f64> {
        let first = self.records.iter().find(|r| r.epoch >= from_epoch)?;
        let last = self.records.last()?;
        let dt = last.sim_time - first.sim_time;
        (dt > 0.0).then(|| (last.queue_area - first.queue_area) / dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Completed,
    Unstable { epoch: u64, max_queue: u32 },
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub learner: LearnerState,
    pub log: TrainingLog,
    pub verdict: Verdict,
}

/// Running on-policy SARSA loop. Keeps the traffic state and pending action
/// between calls so training can be resumed in chunks.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    cfg: &'a SystemConfig,
    temperature: f64,
    pub learner: LearnerState,
    state: QueueState,
    action: usize,
    last: StepOutcome,
    cumulative_cost: f64,
    sim_time: f64,
    queue_area: f64,
}

impl<'a> Trainer<'a> {
    /// `a[0]` is drawn from `π_{w[0]}(· | x[0])`.
    pub fn new<R: Rng + ?Sized>(
        cfg: &'a SystemConfig,
        learner: LearnerState,
        temperature: f64,
        initial_state: Option<QueueState>,
        rng: &mut R,
    ) -> Result<Self> {
        if learner.weights.len() != cfg.server_count() {
            return Err(Error::InvalidConfig(format!(
                "learner has {} weights for {} servers",
                learner.weights.len(),
                cfg.server_count()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let state = initial_state.unwrap_or_else(|| QueueState::zeros(cfg.server_count()));
        if state.len() != cfg.server_count() {
            return Err(Error::InvalidConfig("initial state has the wrong dimension".into()));
        }
        let action = sample_wsq(&state, &learner.weights, temperature, rng);
        Ok(Trainer {
            cfg,
            temperature,
            learner,
            state,
            action,
            last: StepOutcome { alpha: 0.0, td_error: 0.0 },
            cumulative_cost: 0.0,
            sim_time: 0.0,
            queue_area: 0.0,
        })
    }

    pub fn state(&self) -> &QueueState {
        &self.state
    }

    pub fn learner(&self) -> &LearnerState {
        &self.learner
    }

    pub fn record(&self) -> LogRecord {
        LogRecord {
            epoch: self.learner.epoch,
            weights: self.learner.weights.as_slice().to_vec(),
            state: self.state.lengths().to_vec(),
            td_error: self.last.td_error,
            alpha: self.last.alpha,
            cumulative_cost: self.cumulative_cost,
            sim_time: self.sim_time,
            queue_area: self.queue_area,
            accepted_steps: self.learner.schedule.accepted_count(),
        }
    }

    /// One epoch of the loop: execute `a[k]`, observe `x[k+1]` and `c[k+1]`,
    /// draw `a[k+1] ~ π_{w[k]}`, update.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StepOutcome {
        let jump = step(&self.state, self.action, self.cfg, rng);
        let next_action = sample_wsq(&jump.next_state, &self.learner.weights, self.temperature, rng);
        self.sim_time += jump.holding_time;
        self.queue_area += self.state.total() as f64 * jump.holding_time;
        self.cumulative_cost += jump.cost;
        let prev = std::mem::replace(&mut self.state, jump.next_state.clone());
        let rec = TransitionRecord::from_jump(prev, self.action, jump, next_action);
        self.action = next_action;
        self.last = sgs_step(&mut self.learner, &rec);
        self.last
    }

    /// Runs `epochs` more epochs, appending to `log` every `log_every`
    /// epochs (and at the end). Stops early if a queue exceeds `safety_cap`.
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        epochs: u64,
        log_every: u64,
        safety_cap: u32,
        log: &mut TrainingLog,
        rng: &mut R,
    ) -> Verdict {
        let log_every = log_every.max(1);
        if log.records.last().is_none_or(|r| r.epoch != self.learner.epoch) {
            log.records.push(self.record());
        }
        for i in 1..=epochs {
            self.advance(rng);
            let max_queue = self.state.max_len();
            if max_queue > safety_cap {
                log.records.push(self.record());
                return Verdict::Unstable {
                    epoch: self.learner.epoch,
                    max_queue,
                };
            }
            if self.learner.epoch.is_multiple_of(log_every) || i == epochs {
                log.records.push(self.record());
            }
        }
        Verdict::Completed
    }
}

/// Algorithm loop from `learner0` for `opts.epochs` epochs.
pub fn train<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    learner0: LearnerState,
    temperature: f64,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(cfg, learner0, temperature, opts.initial_state.clone(), rng)?;
    let mut log = TrainingLog::default();
    let verdict = trainer.run(opts.epochs, opts.log_every, opts.safety_cap, &mut log, rng);
    Ok(TrainReport {
        learner: trainer.learner,
        log,
        verdict,
    })
}
