//! Ground-truth slate environment.
//!
//! Users choose from a slate by a conditional logit on the affinity
//! `⟨preference, embedding⟩ / temperature`, earn an engagement-style reward
//! `max(0, quality · (1 + affinity) + noise)` and drift their preference
//! toward what they click.

use alloc::vec::Vec;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::SimConfig;
use crate::data::{validate_slate, ItemId, StepRecord, Trajectory, UserId};
use crate::diffcore::Matrix;
use crate::math;
use crate::rng::{self, tag, Rng};
use crate::{Error, Result};

/// Test users get ids from this base upward so they never collide with
/// training users.
pub const TEST_USER_ID_BASE: UserId = 1_000_000_000;

/// Items with unit-norm embeddings and a quality score in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemCatalog {
    embeddings: Matrix,
    quality: Vec<f64>,
}

impl ItemCatalog {
    pub fn generate(n_items: usize, d_item: usize, rng: &mut Rng) -> Self {
        let mut embeddings = Matrix::zeros(n_items, d_item);
        for i in 0..n_items {
            let row = embeddings.row_mut(i);
            for x in row.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            math::normalize(row);
        }
        let quality = (0..n_items).map(|_| rng.random::<f64>()).collect();
        Self {
            embeddings,
            quality,
        }
    }

    /// Rows are renormalized; qualities must lie in `[0, 1]`.
    pub fn from_parts(mut embeddings: Matrix, quality: Vec<f64>) -> Result<Self> {
        if quality.len() != embeddings.rows() {
            return Err(Error::DimensionMismatch {
                what: "catalog quality",
                expected: embeddings.rows(),
                got: quality.len(),
            });
        }
        if quality.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::InvalidArgument("quality must lie in [0, 1]".into()));
        }
        for i in 0..embeddings.rows() {
            math::normalize(embeddings.row_mut(i));
        }
        Ok(Self {
            embeddings,
            quality,
        })
    }

    pub fn n_items(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embedding(&self, item: ItemId) -> &[f64] {
        self.embeddings.row(item)
    }

    pub fn quality(&self, item: ItemId) -> f64 {
        self.quality[item]
    }

    fn check_slate(&self, slate: &[ItemId]) -> Result<()> {
        validate_slate(slate)?;
        if let Some(&bad) = slate.iter().find(|&&i| i >= self.n_items()) {
            return Err(Error::InvalidSlate(alloc::format!(
                "item {bad} outside catalog of {}",
                self.n_items()
            )));
        }
        Ok(())
    }
}

/// A hidden user drawn from the population.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthUser {
    pub preference: Vec<f64>,
    pub temperature: f64,
    pub drift_rate: f64,
    pub reward_noise_std: f64,
    pub cluster_id: usize,
}

impl GroundTruthUser {
    pub fn affinity(&self, catalog: &ItemCatalog, item: ItemId) -> f64 {
        math::dot(&self.preference, catalog.embedding(item))
    }
}

/// Live episode state. The user is visible to the simulator and to oracle
/// policies only.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub history: Vec<ItemId>,
    pub user: GroundTruthUser,
    pub t: usize,
}

impl EnvState {
    pub fn new(user: GroundTruthUser) -> Self {
        Self {
            history: Vec::new(),
            user,
            t: 0,
        }
    }
}

/// Anything that proposes slates inside the simulator.
pub trait SlatePolicy {
    /// Called once per test user with the user's warm-up trajectory before
    /// the evaluated episode starts.
    fn adapt(&mut self, _warmup: &Trajectory, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }

    /// `k` distinct item ids for the current state.
    fn propose(&mut self, sim: &Simulator, state: &EnvState, k: usize, rng: &mut Rng)
        -> Result<Vec<ItemId>>;
}

/// Uniformly random slates.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomPolicy;

impl SlatePolicy for RandomPolicy {
    fn propose(&mut self, sim: &Simulator, _: &EnvState, k: usize, rng: &mut Rng) -> Result<Vec<ItemId>> {
        random_slate(sim.catalog().n_items(), k, rng)
    }
}

/// Top-k by the hidden user's true affinity (ties to the lowest id).
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePolicy;

impl SlatePolicy for OraclePolicy {
    fn propose(&mut self, sim: &Simulator, state: &EnvState, k: usize, _: &mut Rng) -> Result<Vec<ItemId>> {
        Ok(sim.oracle_slate(&state.user, k))
    }
}

/// With probability `epsilon` a uniformly random slate, otherwise the
/// oracle slate.
#[derive(Clone, Copy, Debug)]
pub struct EpsilonGreedyOracle {
    pub epsilon: f64,
}

impl SlatePolicy for EpsilonGreedyOracle {
    fn propose(&mut self, sim: &Simulator, state: &EnvState, k: usize, rng: &mut Rng) -> Result<Vec<ItemId>> {
        if rng.random::<f64>() < self.epsilon {
            random_slate(sim.catalog().n_items(), k, rng)
        } else {
            Ok(sim.oracle_slate(&state.user, k))
        }
    }
}

fn random_slate(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<ItemId>> {
    if k > n {
        return Err(Error::InvalidArgument(alloc::format!("slate size {k} exceeds {n} items")));
    }
    Ok(index::sample(rng, n, k).into_vec())
}

/// Which population a user index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UserPool {
    Train,
    Test,
}

impl UserPool {
    fn tag(self) -> u64 {
        match self {
            UserPool::Train => tag::TRAIN_USERS,
            UserPool::Test => tag::TEST_USERS,
        }
    }

    pub fn user_id(self, index: usize) -> UserId {
        match self {
            UserPool::Train => index as UserId,
            UserPool::Test => TEST_USER_ID_BASE + index as UserId,
        }
    }
}

/// Mean and population standard deviation of per-user returns.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineReport {
    pub mean: f64,
    pub std: f64,
    pub per_user: Vec<f64>,
}

impl OnlineReport {
    pub fn from_returns(per_user: Vec<f64>) -> Self {
        Self {
            mean: math::mean(&per_user),
            std: math::std_dev(&per_user),
            per_user,
        }
    }
}

/// The environment: catalog, cluster centroids and the seed that fixes
/// every user and episode stream.
#[derive(Clone, Debug)]
pub struct Simulator {
    config: SimConfig,
    catalog: ItemCatalog,
    centroids: Vec<Vec<f64>>,
    seed: u64,
}

impl Simulator {
    pub fn new(config: SimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut world = rng::stream(seed, tag::WORLD, 0);
        let catalog = ItemCatalog::generate(config.n_items, config.d_item, &mut world);
        let centroids = (0..config.n_clusters)
            .map(|_| {
                let mut c: Vec<f64> = (0..config.d_item).map(|_| world.sample(StandardNormal)).collect();
                math::normalize(&mut c);
                c
            })
            .collect();
        Ok(Self {
            config,
            catalog,
            centroids,
            seed,
        })
    }

    /// Explicit catalog and centroids (centroids are normalized).
    pub fn from_parts(
        config: SimConfig,
        catalog: ItemCatalog,
        mut centroids: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if centroids.is_empty() || centroids.iter().any(|c| c.len() != catalog.dim()) {
            return Err(Error::InvalidArgument("centroids must match the item dimension".into()));
        }
        centroids.iter_mut().for_each(|c| math::normalize(c));
        let config = SimConfig {
            n_items: catalog.n_items(),
            d_item: catalog.dim(),
            n_clusters: centroids.len(),
            ..config
        };
        config.validate()?;
        Ok(Self {
            config,
            catalog,
            centroids,
            seed,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn catalog(&self) -> &ItemCatalog {
        &self.catalog
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `normalize(centroid[cluster] + σ·N(0, I))`, cluster uniform.
    pub fn sample_user(&self, rng: &mut Rng) -> GroundTruthUser {
        let cluster_id = rng.random_range(0..self.centroids.len());
        let sigma = self.config.cluster_dispersion;
        let mut preference = self.centroids[cluster_id].clone();
        if sigma > 0.0 {
            for x in preference.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x += sigma * z;
            }
            math::normalize(&mut preference);
        }
        GroundTruthUser {
            preference,
            temperature: self.config.temperature,
            drift_rate: self.config.drift_rate,
            reward_noise_std: self.config.reward_noise_std,
            cluster_id,
        }
    }

    /// User `index` of `pool`; the same index always yields the same user.
    pub fn pool_user(&self, pool: UserPool, index: usize) -> GroundTruthUser {
        self.sample_user(&mut rng::stream(self.seed, pool.tag(), index as u64))
    }

    /// Conditional-logit choice probabilities over `slate`.
    pub fn choice_probs(&self, user: &GroundTruthUser, slate: &[ItemId]) -> Result<Vec<f64>> {
        self.catalog.check_slate(slate)?;
        let utilities: Vec<f64> = slate
            .iter()
            .map(|&i| user.affinity(&self.catalog, i) / user.temperature)
            .collect();
        Ok(math::softmax(&utilities))
    }

    /// Samples a click; returns it with the choice probabilities.
    pub fn user_choice(
        &self,
        user: &GroundTruthUser,
        _state: &EnvState,
        slate: &[ItemId],
        rng: &mut Rng,
    ) -> Result<(ItemId, Vec<f64>)> {
        let probs = self.choice_probs(user, slate)?;
        let pos = sample_categorical(&probs, rng);
        Ok((slate[pos], probs))
    }

    /// `max(0, quality · (1 + affinity) + N(0, σ²))`.
    pub fn user_reward(&self, user: &GroundTruthUser, click: ItemId, rng: &mut Rng) -> f64 {
        let base = self.catalog.quality(click) * (1.0 + user.affinity(&self.catalog, click));
        let noise = if user.reward_noise_std > 0.0 {
            Normal::new(0.0, user.reward_noise_std)
                .expect("finite std")
                .sample(rng)
        } else {
            0.0
        };
        (base + noise).max(0.0)
    }

    /// One environment transition; mutates `state` into the next state.
    pub fn env_step(&self, state: &mut EnvState, slate: &[ItemId], rng: &mut Rng) -> Result<StepRecord> {
        let (click, _) = self.user_choice(&state.user, state, slate, rng)?;
        let reward = self.user_reward(&state.user, click, rng);
        let rate = state.user.drift_rate;
        if rate > 0.0 {
            let emb = self.catalog.embedding(click);
            for (p, e) in state.user.preference.iter_mut().zip(emb) {
                *p += rate * e;
            }
            math::normalize(&mut state.user.preference);
        }
        state.history.push(click);
        state.t += 1;
        Ok(StepRecord {
            slate: slate.to_vec(),
            click,
            reward,
        })
    }

    /// Top-k items by true affinity, ties to the lowest id.
    pub fn oracle_slate(&self, user: &GroundTruthUser, k: usize) -> Vec<ItemId> {
        let aff: Vec<f64> = (0..self.catalog.n_items())
            .map(|i| user.affinity(&self.catalog, i))
            .collect();
        top_k(&aff, k)
    }

    /// Runs `policy` for `horizon` steps from `state`.
    pub fn run_episode(
        &self,
        state: &mut EnvState,
        policy: &mut dyn SlatePolicy,
        horizon: usize,
        k: usize,
        user_id: UserId,
        rng: &mut Rng,
    ) -> Result<Trajectory> {
        let mut traj = Trajectory::new(user_id);
        for _ in 0..horizon {
            let slate = policy.propose(self, state, k, rng)?;
            traj.steps.push(self.env_step(state, &slate, rng)?);
        }
        Ok(traj)
    }

    /// The logged episode of user `index` in `pool`, together with the
    /// user's state at the end of it.
    pub fn logged_episode(
        &self,
        pool: UserPool,
        index: usize,
        horizon: usize,
        k: usize,
        logging_policy: &mut dyn SlatePolicy,
    ) -> Result<(Trajectory, EnvState)> {
        let mut state = EnvState::new(self.pool_user(pool, index));
        let mut rng = rng::stream(self.seed, tag::EPISODE ^ pool.tag() << 8, index as u64);
        let traj = self.run_episode(&mut state, logging_policy, horizon, k, pool.user_id(index), &mut rng)?;
        Ok((traj, state))
    }

    /// Offline logs for users `0..n_users` of `pool`.
    pub fn generate_offline_logs(
        &self,
        pool: UserPool,
        n_users: usize,
        horizon: usize,
        k: usize,
        logging_policy: &mut dyn SlatePolicy,
    ) -> Result<Vec<Trajectory>> {
        (0..n_users)
            .map(|i| self.logged_episode(pool, i, horizon, k, logging_policy).map(|(t, _)| t))
            .collect()
    }

    /// The default ε-greedy logging policy from the config.
    pub fn logging_policy(&self) -> EpsilonGreedyOracle {
        EpsilonGreedyOracle {
            epsilon: self.config.logging_epsilon,
        }
    }

    /// One-shot online evaluation over test users `0..n_users`.
    ///
    /// Each user first produces a warm-up trajectory under the logging
    /// policy (the same trajectory the test log holds for that user); the
    /// evaluated policy adapts to it and then plays a fresh `horizon`-step
    /// session against the same (drifted) user. Returns the statistics of
    /// per-user cumulative true reward.
    pub fn evaluate_online(
        &self,
        policy: &mut dyn SlatePolicy,
        n_users: usize,
        horizon: usize,
        k: usize,
        eval_seed: u64,
    ) -> Result<OnlineReport> {
        let mut logging = self.logging_policy();
        let warmup_len = self.config.episode_len;
        let mut returns = Vec::with_capacity(n_users);
        for i in 0..n_users {
            let (warmup, end) = self.logged_episode(UserPool::Test, i, warmup_len, self.config.slate_size, &mut logging)?;
            let mut rng = rng::stream(eval_seed, tag::EVAL, i as u64);
            policy.adapt(&warmup, &mut rng)?;
            let mut state = EnvState::new(end.user);
            let traj = self.run_episode(&mut state, policy, horizon, k, warmup.user_id, &mut rng)?;
            returns.push(traj.steps.iter().map(|s| s.reward).sum());
        }
        Ok(OnlineReport::from_returns(returns))
    }
}

/// Index of a draw from a categorical distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Indices of the `k` largest values, ties to the lowest index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
