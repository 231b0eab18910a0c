//! Meta-level model-based reinforcement learning for cold-start slate
//! recommendation.
//!
//! The crate is `no_std` (with `alloc`). It holds every numerical piece of
//! the pipeline:
//!
//! - [`diffcore`]: dense matrices, a reverse-mode tape, small MLPs, diagonal
//!   Gaussians and an Adam optimizer.
//! - [`envsim`]: the ground-truth slate environment used to generate offline
//!   logs and to evaluate policies online.
//! - [`data`]: trajectories, fixed-window states and user-level splits.
//! - [`context`]: per-user context inference from one behavior sequence.
//! - [`usermodel`]: variational user policy plus the adversarial
//!   reward/shaping discriminator.
//! - [`recagent`]: variational Plackett–Luce slate policy.
//! - [`mireg`]: Jensen–Shannon mutual-information bound between the two
//!   latent policy variables.
//! - [`orchestrate`]: meta-training schedule, one-shot adaptation and the
//!   model-error probe.
//! - [`evalmetrics`]: offline reranking metrics.
//!
//! File formats, configuration loading and the command-line driver live in
//! the companion `m3rec` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod config;
pub mod context;
pub mod data;
pub mod diffcore;
pub mod envsim;
mod error;
pub mod evalmetrics;
pub mod math;
pub mod mireg;
pub mod orchestrate;
pub mod pg;
pub mod recagent;
pub mod rng;
pub mod usermodel;

pub use error::{Error, Result};
