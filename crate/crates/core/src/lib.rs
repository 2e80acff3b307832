//! Meta-learned learning-rate schedules for SGD.
//!
//! The centerpiece is a small LSTM-cell meta-network that maps the current
//! training loss to a bounded learning rate `alpha in (0, gamma)`. It is
//! trained online while the inner model trains: every `t_val` steps a one-step
//! lookahead of the inner model is scored on a held-out validation batch and
//! the resulting hypergradient drives an Adam update of the meta-net.
//!
//! Crate layout:
//!
//! - [`numcore`] — dense f64 kernels, seeded RNG streams, activations, loss
//!   primitives.
//! - [`models`] — inner learner models (softmax regression, ReLU MLPs) with
//!   analytic gradients and SGD/SGDM steps.
//! - [`mlrsnet`] — the meta-network: forward pass, single-step backward with
//!   respect to its parameters, checkpoint serialization.
//! - [`schedules`] — classical LR schedules (fixed, exponential, multi-step,
//!   warm restarts, hypergradient descent) and the frozen meta-net schedule,
//!   all behind one scheduler contract.
//! - [`metatrain`] — the interleaved training loop: meta updates of the
//!   schedule net and SGD updates of the learner.
//! - [`transfer`] — reusing checkpoints from a finished run to drive new
//!   training runs via a segmented frozen schedule.
//! - [`harness`] — synthetic datasets, experiment configs, CSV metrics, CLI.

pub mod error;
pub mod harness;
pub mod metatrain;
pub mod mlrsnet;
pub mod models;
pub mod numcore;
pub mod schedules;
pub mod transfer;

pub use error::{Error, Result};
