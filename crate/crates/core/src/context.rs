//! Per-user context inference `p_f(c | τ)`.
//!
//! Every step of a trajectory is mapped by one shared network to a
//! diagonal Gaussian; the posterior is the precision-weighted product of
//! those Gaussians with the standard-normal prior. The product does not
//! depend on step order and an empty trajectory returns the prior.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{EpisodeBatch, ItemEmbeddings, StepBatch, Trajectory};
use crate::diffcore::{
    kl_diag_gaussians, kl_diag_gaussians_tape, split_gaussian, standard_normal_matrix,
    BoundApproximator, FunctionApproximator, GaussianPosterior, GaussianVars, Matrix, Tape, Var,
    LOG_STD_MAX, LOG_STD_MIN,
};
use crate::rng::Rng;
use crate::Result;

/// Inferred context: the posterior and one reparameterized sample.
#[derive(Clone, Debug, PartialEq)]
pub struct UserContext {
    pub posterior: GaussianPosterior,
    pub sample: Vec<f64>,
}

impl UserContext {
    /// The prior with a zero sample, used when context is disabled.
    pub fn prior(dim: usize) -> Self {
        Self {
            posterior: GaussianPosterior::standard(dim),
            sample: alloc::vec![0.0; dim],
        }
    }
}

/// `KL(posterior ‖ N(0, I))`.
pub fn context_kl_regularizer(ctx: &UserContext) -> f64 {
    let prior = GaussianPosterior::standard(ctx.posterior.dim());
    kl_diag_gaussians(&ctx.posterior, &prior).expect("same dimension")
}

/// Contexts for a batch of trajectories, on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    pub posterior: GaussianVars,
    /// `n_trajectories × d_context`.
    pub sample: Var,
}

impl ContextVars {
    /// Row-wise KL to the prior, `n × 1`.
    pub fn kl_to_prior(&self, tape: &mut Tape) -> Var {
        let rows = self.posterior.rows(tape);
        let dim = self.posterior.dim(tape);
        let prior = GaussianVars::standard(tape, rows, dim);
        kl_diag_gaussians_tape(tape, self.posterior, prior)
    }

    /// `β_c ·` mean KL to the prior; `None` when `beta_context` is zero.
    pub fn regularizer(&self, tape: &mut Tape, beta_context: f64) -> Option<Var> {
        if beta_context == 0.0 {
            return None;
        }
        let kl = self.kl_to_prior(tape);
        let m = tape.mean(kl);
        Some(tape.scale(m, beta_context))
    }

    /// The sample repeated for every step row, `rows × d_context`.
    pub fn per_row(&self, tape: &mut Tape, trajectory: &[usize]) -> Var {
        tape.gather_rows(self.sample, trajectory.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoder {
    net: FunctionApproximator,
    d_context: usize,
    window: usize,
}

impl ContextEncoder {
    pub fn new(cfg: &ModelConfig, d_item: usize, rng: &mut Rng) -> Result<Self> {
        let input = Self::step_input_dim(cfg.window, d_item);
        let net = FunctionApproximator::new(&cfg.layers(input, 2 * cfg.d_context), cfg.activation, rng)?;
        Ok(Self {
            net,
            d_context: cfg.d_context,
            window: cfg.window,
        })
    }

    pub fn from_parts(net: FunctionApproximator, d_context: usize, window: usize) -> Self {
        Self {
            net,
            d_context,
            window,
        }
    }

    /// State features, clicked item, slate mean and reward.
    pub fn step_input_dim(window: usize, d_item: usize) -> usize {
        window * d_item + 2 * d_item + 1
    }

    pub fn d_context(&self) -> usize {
        self.d_context
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn net(&self) -> &FunctionApproximator {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FunctionApproximator {
        &mut self.net
    }

    /// Posterior and sample for every trajectory in `trajectories`, using
    /// noise `eps` (`n × d_context`). With `enabled == false` every context
    /// is the prior with a zero sample and nothing is tracked.
    pub fn encode_tape(
        &self,
        net: &BoundApproximator,
        tape: &mut Tape,
        table: Var,
        trajectories: &[&Trajectory],
        eps: Matrix,
        enabled: bool,
    ) -> ContextVars {
        let n = trajectories.len();
        let d = self.d_context;
        if !enabled {
            let posterior = GaussianVars::standard(tape, n, d);
            let sample = tape.constant(Matrix::zeros(n, d));
            return ContextVars { posterior, sample };
        }
        let batch = StepBatch::from_trajectories(trajectories, self.window);
        let state = tape.embed_window(table, batch.windows.clone(), self.window);
        let click = tape.gather_rows(table, batch.clicks.clone());
        let slate = tape.embed_mean(table, batch.slates.clone());
        let reward = tape.constant(Matrix::column(batch.rewards.clone()));
        let input = tape.concat_cols(&[state, click, slate, reward]);
        let out = net.forward(tape, input);
        let steps = split_gaussian(tape, out, d);

        // precision-weighted product with the N(0, I) prior
        let m2 = tape.scale(steps.log_std, -2.0);
        let prec = tape.exp(m2);
        let weighted = tape.mul(prec, steps.mean);
        let prec_sum = tape.segment_sum(prec, batch.trajectory.clone(), n);
        let num = tape.segment_sum(weighted, batch.trajectory, n);
        let total = tape.offset(prec_sum, 1.0);
        let mean = tape.div(num, total);
        let ln_total = tape.ln(total);
        let raw_log_std = tape.scale(ln_total, -0.5);
        let log_std = tape.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);
        let posterior = GaussianVars { mean, log_std };
        let sample = posterior.sample(tape, eps);
        ContextVars { posterior, sample }
    }

    /// Contexts of an episode batch from its context sources.
    pub fn encode_batch(
        &self,
        net: &BoundApproximator,
        tape: &mut Tape,
        table: Var,
        batch: &EpisodeBatch,
        enabled: bool,
    ) -> ContextVars {
        let sources = batch.context_refs();
        self.encode_tape(net, tape, table, &sources, batch.eps_context.clone(), enabled)
    }

    /// Context of one trajectory with frozen parameters.
    pub fn encode(&self, trajectory: &Trajectory, embeddings: &ItemEmbeddings, rng: &mut Rng) -> UserContext {
        let mut tape = Tape::new();
        let net = self.net.bind_frozen(&mut tape);
        let table = embeddings.bind(&mut tape, false);
        let eps = standard_normal_matrix(rng, 1, self.d_context);
        let vars = self.encode_tape(&net, &mut tape, table, &[trajectory], eps, true);
        UserContext {
            posterior: vars.posterior.posterior(&tape, 0),
            sample: tape.value(vars.sample).row(0).to_vec(),
        }
    }
}
