//! Iterative learning MPC over sampled safe sets, and task decomposition that
//! transfers stored executions to a reordered sequence of subtasks.
//!
//! The layering, bottom up:
//!
//! - [`solver`]: dense convex QP (primal active set with Phase-1 LP).
//! - [`dynamics`]: discrete-time models and finite-difference linearization.
//! - [`task`]: subtask boxes, transition predicates, and the time-indicator stage cost.
//! - [`safeset`]: recorded executions, cost-to-go, guard sets, candidate queries.
//! - [`ilmpc`]: the receding-horizon controller and the closed-loop iteration.
//! - [`tdmpc`]: one-step controllability and the backward decomposition pass.
//! - [`scenarios`]: the racing and robot-corridor experiments with their baselines.
//! - [`experiment`]: config-driven train / decompose / evaluate / replay workflows.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod ilmpc;
pub mod par;
pub mod safeset;
pub mod scenarios;
pub mod solver;
pub mod task;
pub mod tdmpc;

pub use error::{Error, Result};
