//! Desk-scale laboratory for one-step flow models on low-dimensional toy
//! distributions with closed-form velocity oracles.
//!
//! The crate trains a small MLP to represent the solution operator of the
//! flow-matching probability-flow ODE: a map `f(x, t, s)` taking the state at
//! time `t` directly to the state at time `s`, so that a single forward pass
//! replaces numerical integration. Everything runs in `f64` on the CPU and is
//! deterministic given a seed.
//!
//! Module map:
//!
//! * [`arr`] - dense rank<=2 `f64` arrays and the plain (non-differentiated)
//!   kernels shared by the optimizer, samplers and metrics.
//! * [`tape`] - reverse-mode automatic differentiation over [`arr::Arr`].
//! * [`flow`] - noising schedules, solution-operator parameterizations,
//!   logit-normal time samplers and the jump-size schedule.
//! * [`net`] - the MLP, its time/label embeddings, and EMA shadow weights.
//! * [`loss`] - the velocity-regression and self-consistency objectives.
//! * [`guide`] - classifier-free guidance mixed into training targets.
//! * [`data`] - Gaussian-mixture datasets and two-sample metrics.
//! * [`sample`] - one-step/multi-step samplers, reference ODE integration and
//!   the analytic mixture velocity oracle.
//! * [`verify`] - residual, boundary and global-error checks on a trained map.
//! * [`config`] - the key=value run-configuration format.
//! * [`checkpoint`] - binary checkpoint encode/decode.
//! * [`train`] - the training loop (Adam, EMA, metrics, resume).

pub mod arr;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod flow;
pub mod guide;
pub mod loss;
pub mod net;
pub mod sample;
pub mod tape;
pub mod train;
pub mod verify;
