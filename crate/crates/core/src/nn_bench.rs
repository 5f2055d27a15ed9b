//! Neural-network benchmark learner.
//!
//! A two-layer ReLU network `Q(x, a) = v·relu(W·enc(x, a) + b) + c` trained
//! with Adam on the one-step SARSA target, used only as a comparison policy.
//! `enc(x, a)` is the queue lengths divided by `1 + max observed length`
//! followed by a one-hot of the action.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_categorical, softmin};
use crate::queue_sim::{step, QueueState, SystemConfig, TransitionRecord};
use crate::sgs::Verdict;

const CHECKPOINT_MAGIC: &[u8; 8] = b"QRMLP\0\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Network parameters stored flat as `[W (hidden×input, row-major), b, v, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    servers: usize,
    hidden: usize,
    params: Vec<f64>,
    /// Divisor for the queue-length inputs.
    pub input_scale: f64,
}

impl MlpParams {
    pub fn zeros(servers: usize, hidden: usize) -> Self {
        let input = 2 * servers;
        MlpParams {
            servers,
            hidden,
            params: vec![0.0; hidden * input + 2 * hidden + 1],
            input_scale: 1.0,
        }
    }

    /// He-uniform first layer, small uniform second layer, zero biases.
    pub fn init<R: Rng + ?Sized>(servers: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(servers, hidden);
        let input = p.input_dim();
        let bound1 = (6.0 / input as f64).sqrt();
        let bound2 = (1.0 / hidden as f64).sqrt();
        for v in &mut p.params[..hidden * input] {
            *v = rng.gen_range(-bound1..bound1);
        }
        let (lo, hi) = p.range_v();
        for v in &mut p.params[lo..hi] {
            *v = rng.gen_range(-bound2..bound2);
        }
        p
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        2 * self.servers
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn range_b(&self) -> (usize, usize) {
        let s = self.hidden * self.input_dim();
        (s, s + self.hidden)
    }

    fn range_v(&self) -> (usize, usize) {
        let s = self.hidden * self.input_dim() + self.hidden;
        (s, s + self.hidden)
    }

    fn idx_c(&self) -> usize {
        self.params.len() - 1
    }

    pub fn weight1(&self, h: usize, i: usize) -> f64 {
        self.params[h * self.input_dim() + i]
    }

    pub fn set_weight1(&mut self, h: usize, i: usize, v: f64) {
        let d = self.input_dim();
        self.params[h * d + i] = v;
    }

    pub fn set_bias1(&mut self, h: usize, v: f64) {
        let (lo, _) = self.range_b();
        self.params[lo + h] = v;
    }

    pub fn set_weight2(&mut self, h: usize, v: f64) {
        let (lo, _) = self.range_v();
        self.params[lo + h] = v;
    }

    pub fn set_bias2(&mut self, v: f64) {
        let i = self.idx_c();
        self.params[i] = v;
    }

    pub fn encode(&self, x: &QueueState, action: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.servers);
        let mut e: Vec<f64> = x.lengths().iter().map(|&v| f64::from(v) / self.input_scale).collect();
        e.extend((0..self.servers).map(|n| if n == action { 1.0 } else { 0.0 }));
        e
    }

    fn pre_activations(&self, input: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        let (b_lo, _) = self.range_b();
        (0..self.hidden)
            .map(|h| {
                let row = &self.params[h * d..(h + 1) * d];
                row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.params[b_lo + h]
            })
            .collect()
    }

    pub fn forward(&self, x: &QueueState, action: usize) -> f64 {
        let z = self.pre_activations(&self.encode(x, action));
        let (v_lo, _) = self.range_v();
        z.iter()
            .enumerate()
            .map(|(h, z)| self.params[v_lo + h] * z.max(0.0))
            .sum::<f64>()
            + self.params[self.idx_c()]
    }

    /// Output and its gradient with respect to every parameter.
    pub fn forward_backward(&self, x: &QueueState, action: usize) -> (f64, Vec<f64>) {
        let input = self.encode(x, action);
        let z = self.pre_activations(&input);
        let d = self.input_dim();
        let (b_lo, _) = self.range_b();
        let (v_lo, _) = self.range_v();
        let mut grad = vec![0.0; self.params.len()];
        let mut out = self.params[self.idx_c()];
        for h in 0..self.hidden {
            let act = z[h].max(0.0);
            let v = self.params[v_lo + h];
            out += v * act;
            grad[v_lo + h] = act;
            if z[h] > 0.0 {
                grad[b_lo + h] = v;
                for i in 0..d {
                    grad[h * d + i] = v * input[i];
                }
            }
        }
        let c = self.idx_c();
        grad[c] = 1.0;
        (out, grad)
    }

    /// Versioned little-endian checkpoint: magic, version, servers, hidden,
    /// input scale, then the flat parameters.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.servers as u32).to_le_bytes())?;
        out.write_all(&(self.hidden as u32).to_le_bytes())?;
        out.write_all(&self.input_scale.to_le_bytes())?;
        for v in &self.params {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let servers = read_u32(&mut input)? as usize;
        let hidden = read_u32(&mut input)? as usize;
        if servers == 0 || hidden == 0 || servers > 1 << 16 || hidden > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible shape {servers}x{hidden}")));
        }
        let mut p = Self::zeros(servers, hidden);
        p.input_scale = read_f64(&mut input)?;
        for v in &mut p.params {
            *v = read_f64(&mut input)?;
        }
        if !p.input_scale.is_finite() || p.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(p)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    /// In-place bias-corrected Adam step on `params` (gradient descent).
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

pub fn mlp_forward(params: &MlpParams, x: &QueueState, action: usize) -> f64 {
    params.forward(x, action)
}

/// One Adam step on `(Q(x, a) − [c + γ Q(x′, a′)])²` with the target held
/// fixed. Returns the loss before the update.
pub fn mlp_train_step(params: &mut MlpParams, adam: &mut AdamState, rec: &TransitionRecord, discount: f64) -> f64 {
    let target = rec.cost + discount * params.forward(&rec.next_state, rec.next_action);
    let (pred, mut grad) = params.forward_backward(&rec.state, rec.action);
    let err = pred - target;
    for g in &mut grad {
        *g *= 2.0 * err;
    }
    adam.update(&mut params.params, &grad);
    err * err
}

pub fn nn_action_probs(params: &MlpParams, x: &QueueState, temperature: f64) -> Vec<f64> {
    let q: Vec<f64> = (0..x.len()).map(|a| params.forward(x, a)).collect();
    softmin(&q, temperature)
}

pub fn nn_wsq_policy<R: Rng + ?Sized>(params: &MlpParams, x: &QueueState, temperature: f64, rng: &mut R) -> usize {
    sample_categorical(&nn_action_probs(params, x, temperature), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnParams {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub discount: f64,
}

fn default_hidden() -> usize {
    64
}

impl Default for NnParams {
    fn default() -> Self {
        NnParams {
            hidden: default_hidden(),
            adam: AdamConfig::default(),
            discount: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NnTrainReport {
    pub params: MlpParams,
    pub adam: AdamState,
    pub epochs: u64,
    pub mean_loss_tail: f64,
    pub verdict: Verdict,
}

/// On-policy one-step training of the network, structured like the SARSA
/// loop with the linear update replaced by an Adam step.
pub fn train_nn<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    nn: &NnParams,
    temperature: f64,
    epochs: u64,
    safety_cap: u32,
    rng: &mut R,
) -> Result<NnTrainReport> {
    if !(nn.discount > 0.0 && nn.discount < 1.0) {
        return Err(Error::InvalidConfig("nn discount must lie in (0, 1)".into()));
    }
    if nn.hidden == 0 {
        return Err(Error::InvalidConfig("nn hidden width must be positive".into()));
    }
    let n = cfg.server_count();
    let mut params = MlpParams::init(n, nn.hidden, rng);
    let mut adam = AdamState::new(nn.adam, params.as_slice().len());
    let mut state = QueueState::zeros(n);
    let mut action = nn_wsq_policy(&params, &state, temperature, rng);
    let tail_from = epochs - epochs / 10;
    let (mut tail_loss, mut tail_n) = (0.0, 0u64);
    for k in 0..epochs {
        let jump = step(&state, action, cfg, rng);
        let max_queue = jump.next_state.max_len();
        if max_queue > safety_cap {
            return Ok(NnTrainReport {
                params,
                adam,
                epochs: k + 1,
                mean_loss_tail: f64::NAN,
                verdict: Verdict::Unstable { epoch: k + 1, max_queue },
            });
        }
        params.input_scale = params.input_scale.max(1.0 + f64::from(max_queue));
        let next_action = nn_wsq_policy(&params, &jump.next_state, temperature, rng);
        let prev = std::mem::replace(&mut state, jump.next_state.clone());
        let rec = TransitionRecord::from_jump(prev, action, jump, next_action);
        action = next_action;
        let loss = mlp_train_step(&mut params, &mut adam, &rec, nn.discount);
        if k >= tail_from {
            tail_loss += loss;
            tail_n += 1;
        }
    }
    Ok(NnTrainReport {
        params,
        adam,
        epochs,
        mean_loss_tail: if tail_n > 0 { tail_loss / tail_n as f64 } else { 0.0 },
        verdict: Verdict::Completed,
    })
}
