//! Configuration blocks shared by the simulator and the learners.
//!
//! Every struct deserializes with `deny_unknown_fields` and falls back to
//! [`Default`] for missing keys, so a config file only lists overrides.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::diffcore::Activation;
use crate::{Error, Result};

/// Ground-truth environment parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_items: usize,
    pub d_item: usize,
    pub n_clusters: usize,
    /// Standard deviation of the per-user offset around its cluster centroid.
    pub cluster_dispersion: f64,
    pub temperature: f64,
    pub drift_rate: f64,
    pub reward_noise_std: f64,
    /// Episode length `T` for logs and online evaluation.
    pub episode_len: usize,
    /// Slate size of the logged data.
    pub slate_size: usize,
    /// Probability that the logging policy shows a uniformly random slate.
    pub logging_epsilon: f64,
    pub n_train_users: usize,
    pub n_test_users: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_items: 200,
            d_item: 16,
            n_clusters: 4,
            cluster_dispersion: 0.1,
            temperature: 0.7,
            drift_rate: 0.05,
            reward_noise_std: 0.1,
            episode_len: 20,
            slate_size: 5,
            logging_epsilon: 0.5,
            n_train_users: 2500,
            n_test_users: 500,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("sim: {m}")));
        if self.n_items == 0 || self.d_item == 0 {
            return bad("n_items and d_item must be positive");
        }
        if self.n_clusters == 0 {
            return bad("n_clusters must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.drift_rate) {
            return bad("drift_rate must lie in [0, 1)");
        }
        if !(self.reward_noise_std >= 0.0) || !(self.cluster_dispersion >= 0.0) {
            return bad("noise and dispersion must be nonnegative");
        }
        if self.slate_size == 0 || self.slate_size > self.n_items {
            return bad("slate_size must lie in 1..=n_items");
        }
        if !(0.0..=1.0).contains(&self.logging_epsilon) {
            return bad("logging_epsilon must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Network shapes shared by every learned map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// State window length `W`.
    pub window: usize,
    pub d_context: usize,
    pub d_latent: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 10,
            d_context: 8,
            d_latent: 8,
            hidden: vec![64],
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.d_context == 0 || self.d_latent == 0 {
            return Err(Error::InvalidArgument(
                "model: window, d_context and d_latent must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("model: hidden sizes must be positive".into()));
        }
        Ok(())
    }

    /// `[input, hidden..., output]`.
    pub fn layers(&self, input: usize, output: usize) -> Vec<usize> {
        let mut l = Vec::with_capacity(self.hidden.len() + 2);
        l.push(input);
        l.extend_from_slice(&self.hidden);
        l.push(output);
        l
    }
}

/// Where model rollouts take their slates from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutSlates {
    /// The current recommendation agent proposes every slate.
    Agent,
    /// Slates are replayed from the user's logged trajectory.
    Logged,
}

/// Which data the recommendation policy gradient consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecData {
    /// Rollouts against the learned user model, rewarded by the recovered
    /// reward.
    Model,
    /// Logged slates and logged rewards.
    Offline,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Replace every context with the prior (zero sample).
    pub no_context: bool,
    /// Skip the mutual-information regularizer.
    pub no_mi: bool,
    /// Skip the user model entirely; train the agent on logged rewards.
    pub model_free: bool,
    /// Stop the MI gradient at `z_rec` (only ψ and `q_φ` update).
    pub detach_rec_in_mi: bool,
}

impl Ablations {
    /// Parses a comma-separated list such as `no_mi,no_context`.
    pub fn apply_flag(&mut self, name: &str) -> Result<()> {
        match name {
            "no_context" => self.no_context = true,
            "no_mi" => self.no_mi = true,
            "model_free" => self.model_free = true,
            "detach_rec_in_mi" => self.detach_rec_in_mi = true,
            "" | "none" => {}
            other => {
                return Err(Error::InvalidArgument(format!("unknown ablation `{other}`")));
            }
        }
        Ok(())
    }
}

/// Meta-training schedule and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub n_outer_iters: usize,
    pub disc_epochs: usize,
    pub user_pg_epochs: usize,
    pub rec_pg_epochs: usize,
    pub mi_epochs: usize,
    /// Users sampled for each outer iteration; the outer-loop epochs pass
    /// over this sample. `0` means every training user.
    pub users_per_iter: usize,
    /// Trajectories per minibatch.
    pub batch_users: usize,
    pub lr: f64,
    /// Weight of the KL term in both ELBOs.
    pub beta: f64,
    /// Weight of the context KL regularizer.
    pub beta_context: f64,
    pub lambda_mi: f64,
    /// Discount of the policy-gradient returns.
    pub gamma: f64,
    /// Discount inside the discriminator's shaping term `γ·h(s′) − h(s)`.
    pub shaping_gamma: f64,
    pub rollout_slates: RolloutSlates,
    pub rec_data: RecData,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            n_outer_iters: 50,
            disc_epochs: 1,
            user_pg_epochs: 1,
            rec_pg_epochs: 1,
            mi_epochs: 1,
            users_per_iter: 500,
            batch_users: 16,
            lr: 1e-3,
            beta: 0.1,
            beta_context: 0.01,
            lambda_mi: 0.1,
            gamma: 0.95,
            shaping_gamma: 0.0,
            rollout_slates: RolloutSlates::Logged,
            rec_data: RecData::Model,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lr,
            self.beta,
            self.beta_context,
            self.lambda_mi,
            self.gamma,
            self.shaping_gamma,
        ];
        if finite.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "schedule: weights must be finite and nonnegative".into(),
            ));
        }
        if self.gamma > 1.0 || self.shaping_gamma > 1.0 {
            return Err(Error::InvalidArgument("schedule: discounts must be ≤ 1".into()));
        }
        if self.batch_users == 0 {
            return Err(Error::InvalidArgument("schedule: batch_users must be positive".into()));
        }
        Ok(())
    }
}

/// The per-update knobs shared by every learner step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateParams {
    pub lr: f64,
    pub beta: f64,
    pub beta_context: f64,
    pub lambda_mi: f64,
    pub gamma: f64,
    pub shaping_gamma: f64,
    pub use_context: bool,
    pub detach_rec_in_mi: bool,
}

impl UpdateParams {
    pub fn new(schedule: &TrainSchedule, ablations: &Ablations) -> Self {
        Self {
            lr: schedule.lr,
            beta: schedule.beta,
            beta_context: schedule.beta_context,
            lambda_mi: schedule.lambda_mi,
            gamma: schedule.gamma,
            shaping_gamma: schedule.shaping_gamma,
            use_context: !ablations.no_context,
            detach_rec_in_mi: ablations.detach_rec_in_mi,
        }
    }
}

impl Default for UpdateParams {
    fn default() -> Self {
        Self::new(&TrainSchedule::default(), &Ablations::default())
    }
}

