//! Minimal differentiable-computation substrate.
//!
//! Gradients come from a [`Tape`] that is rebuilt for every loss
//! evaluation: leaves are bound from parameter storage, operations append
//! nodes, and [`Tape::backward`] walks the nodes in reverse.

mod approx;
pub mod gradcheck;
mod gaussian;
mod matrix;
mod optim;
mod tape;

pub use approx::{Activation, BoundApproximator, FunctionApproximator};
pub use gaussian::{
    kl_diag_gaussians, kl_diag_gaussians_tape, sample_reparameterized, split_gaussian,
    standard_normal, standard_normal_matrix, GaussianPosterior, GaussianVars, LOG_STD_MAX,
    LOG_STD_MIN,
};
pub use matrix::Matrix;
pub use optim::{Adam, AdamConfig};
pub use tape::{plackett_luce_log_prob_row, Gradients, RaggedIds, Tape, Var};
