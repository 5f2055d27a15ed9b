//! Reinforcement-learned routing for parallel M/M/1 queues.
//!
//! The crate simulates a dispatcher in front of `N` exponential servers, learns
//! a weighted-shortest-queue routing rule with semi-gradient SARSA, and
//! provides the tooling to evaluate and stress it: baseline policies, a small
//! neural benchmark, Lyapunov drift estimates and system-time metrics.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod cli;
pub mod error;
pub mod lyapunov;
pub mod metrics;
pub mod nn_bench;
pub mod policy;
pub mod queue_sim;
pub mod sgs;

pub use error::{Error, Result};
