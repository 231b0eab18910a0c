//! Trajectory data model, fixed-window states and user-level splits.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Matrix, RaggedIds, Tape, Var};
use crate::math;
use crate::rng::{self, tag, Rng};
use crate::{Error, Result};

pub type ItemId = usize;
pub type UserId = u64;

/// One interaction: the shown slate, the clicked item and its reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub slate: Vec<ItemId>,
    pub click: ItemId,
    pub reward: f64,
}

impl StepRecord {
    pub fn validate(&self) -> Result<()> {
        validate_slate(&self.slate)?;
        if !self.slate.contains(&self.click) {
            return Err(Error::InvalidSlate(format!(
                "click {} not in slate {:?}",
                self.click, self.slate
            )));
        }
        if !self.reward.is_finite() {
            return Err(Error::InvalidArgument("non-finite reward".into()));
        }
        Ok(())
    }
}

/// Rejects empty slates and slates with repeated ids.
pub fn validate_slate(slate: &[ItemId]) -> Result<()> {
    if slate.is_empty() {
        return Err(Error::InvalidSlate("empty slate".into()));
    }
    let mut seen = BTreeSet::new();
    for &i in slate {
        if !seen.insert(i) {
            return Err(Error::InvalidSlate(format!("duplicate item {i} in slate")));
        }
    }
    Ok(())
}

/// One user's time-ordered behavior sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: UserId,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn new(user_id: UserId) -> Self {
        Self {
            user_id,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clicks(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.steps.iter().map(|s| s.click)
    }

    /// Checks every step, and that ids fall inside a catalog of `n_items`.
    pub fn validate(&self, n_items: usize) -> Result<()> {
        for (t, s) in self.steps.iter().enumerate() {
            s.validate().map_err(|e| {
                Error::InvalidSlate(format!("user {} step {t}: {e}", self.user_id))
            })?;
            if let Some(&bad) = s.slate.iter().find(|&&i| i >= n_items) {
                return Err(Error::InvalidSlate(format!(
                    "user {} step {t}: item {bad} outside catalog of {n_items}",
                    self.user_id
                )));
            }
        }
        Ok(())
    }

    /// First `n` steps as their own trajectory.
    pub fn prefix(&self, n: usize) -> Trajectory {
        Trajectory {
            user_id: self.user_id,
            steps: self.steps[..n.min(self.steps.len())].to_vec(),
        }
    }
}

/// Fixed-length window over the most recent clicks; `None` is padding and
/// only ever appears as a contiguous prefix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct State {
    pub window: Vec<Option<ItemId>>,
    pub t: usize,
}

/// Last `min(|history|, w)` clicks, left-padded to length `w`.
pub fn make_state(history: &[ItemId], w: usize) -> State {
    assert!(w >= 1, "window must be at least 1");
    let keep = history.len().min(w);
    let mut window = Vec::with_capacity(w);
    window.extend(core::iter::repeat_n(None, w - keep));
    window.extend(history[history.len() - keep..].iter().map(|&i| Some(i)));
    State {
        window,
        t: history.len(),
    }
}

impl State {
    /// Concatenated item embeddings; padding slots are zero vectors.
    pub fn featurize(&self, embeddings: &Matrix) -> Vec<f64> {
        let d = embeddings.cols();
        let mut out = alloc::vec![0.0; self.window.len() * d];
        for (slot, id) in self.window.iter().enumerate() {
            if let Some(id) = id {
                out[slot * d..(slot + 1) * d].copy_from_slice(embeddings.row(*id));
            }
        }
        out
    }

    /// The state after clicking `click`.
    pub fn advance(&self, click: ItemId) -> State {
        let mut window = self.window[1..].to_vec();
        window.push(Some(click));
        State {
            window,
            t: self.t + 1,
        }
    }
}

/// Item embedding table. Simulator catalogs are fixed; catalogs built for
/// ingested logs start random and are learnable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddings {
    table: Matrix,
    learnable: bool,
    #[serde(skip)]
    optimizer: Adam,
}

impl ItemEmbeddings {
    pub fn fixed(table: Matrix) -> Self {
        let n = table.rows() * table.cols();
        Self {
            table,
            learnable: false,
            optimizer: Adam::new(n, AdamConfig::default()),
        }
    }

    /// Random unit-norm rows, marked learnable.
    pub fn random(n_items: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut table = crate::diffcore::standard_normal_matrix(rng, n_items, dim);
        for i in 0..n_items {
            math::normalize(table.row_mut(i));
        }
        Self {
            learnable: true,
            ..Self::fixed(table)
        }
    }

    pub fn with_learnable(mut self, learnable: bool) -> Self {
        self.learnable = learnable;
        self
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn n_items(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    /// The table as a tape leaf; tracked only when learnable and `train`.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Var {
        if self.learnable && train {
            tape.param(self.table.clone())
        } else {
            tape.constant(self.table.clone())
        }
    }

    pub fn optimizer_step(&mut self, grad: &Matrix, lr: f64) -> Result<()> {
        if !self.learnable {
            return Ok(());
        }
        self.optimizer
            .step(self.table.as_mut_slice(), grad.as_slice(), lr)
    }
}

/// Steps of several trajectories flattened into aligned columns, ready to
/// be featurized on a tape. Row order is trajectory-major, time-minor.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub window: usize,
    /// `rows × window` state ids before each step.
    pub windows: Vec<Option<ItemId>>,
    /// `rows × window` state ids after each step's click.
    pub next_windows: Vec<Option<ItemId>>,
    pub slates: RaggedIds,
    pub clicks: Vec<ItemId>,
    pub rewards: Vec<f64>,
    /// Index (into the source list) of each row's trajectory.
    pub trajectory: Vec<usize>,
    pub t: Vec<usize>,
}

impl StepBatch {
    pub fn from_trajectories(trajectories: &[&Trajectory], window: usize) -> Self {
        let mut b = StepBatch {
            window,
            slates: RaggedIds::new(),
            ..Default::default()
        };
        for (ti, traj) in trajectories.iter().enumerate() {
            let mut state = make_state(&[], window);
            for (t, step) in traj.steps.iter().enumerate() {
                let next = state.advance(step.click);
                b.windows.extend_from_slice(&state.window);
                b.next_windows.extend_from_slice(&next.window);
                b.slates.push(&step.slate);
                b.clicks.push(step.click);
                b.rewards.push(step.reward);
                b.trajectory.push(ti);
                b.t.push(t);
                state = next;
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }
}

/// Tape-side features of a [`StepBatch`].
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// `rows × window·d` state featurization.
    pub state: Var,
    pub next_state: Var,
    /// `rows × d` clicked-item embedding.
    pub click: Var,
    /// `rows × d` mean embedding of the slate.
    pub slate_mean: Var,
    /// `rows × 1` observed reward.
    pub reward: Var,
}

impl StepBatch {
    pub fn bind(&self, tape: &mut Tape, table: Var) -> StepVars {
        StepVars {
            state: tape.embed_window(table, self.windows.clone(), self.window),
            next_state: tape.embed_window(table, self.next_windows.clone(), self.window),
            click: tape.gather_rows(table, self.clicks.clone()),
            slate_mean: tape.embed_mean(table, self.slates.clone()),
            reward: tape.constant(Matrix::column(self.rewards.clone())),
        }
    }

    /// Number of rows in each trajectory, in source order.
    pub fn lengths(&self, n_trajectories: usize) -> Vec<usize> {
        let mut out = alloc::vec![0; n_trajectories];
        for &ti in &self.trajectory {
            out[ti] += 1;
        }
        out
    }
}

/// Trajectories paired with the trajectories their contexts are inferred
/// from, plus the frozen noise that makes every latent sample
/// recomputable on a fresh tape.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub episodes: Vec<Trajectory>,
    /// `context_sources[i]` conditions `episodes[i]`.
    pub context_sources: Vec<Trajectory>,
    pub steps: StepBatch,
    /// `episodes × d_context`.
    pub eps_context: Matrix,
    /// `rows × d_latent`, for the user latent.
    pub eps_user: Matrix,
    /// `rows × d_latent`, for the recommender latent.
    pub eps_rec: Matrix,
}

impl EpisodeBatch {
    /// Draws fresh noise for every latent.
    pub fn new(
        episodes: Vec<Trajectory>,
        context_sources: Vec<Trajectory>,
        window: usize,
        d_context: usize,
        d_latent: usize,
        rng: &mut Rng,
    ) -> Self {
        assert_eq!(episodes.len(), context_sources.len(), "one context source per episode");
        let eps_context = crate::diffcore::standard_normal_matrix(rng, episodes.len(), d_context);
        let steps = StepBatch::from_trajectories(&episodes.iter().collect::<Vec<_>>(), window);
        let eps_user = crate::diffcore::standard_normal_matrix(rng, steps.len(), d_latent);
        let eps_rec = crate::diffcore::standard_normal_matrix(rng, steps.len(), d_latent);
        Self {
            episodes,
            context_sources,
            steps,
            eps_context,
            eps_user,
            eps_rec,
        }
    }

    /// Rebuilds the aligned steps after the episodes were filled in,
    /// keeping the noise already drawn.
    pub fn with_noise(
        episodes: Vec<Trajectory>,
        context_sources: Vec<Trajectory>,
        window: usize,
        eps_context: Matrix,
        eps_user: Matrix,
        eps_rec: Matrix,
    ) -> Self {
        let steps = StepBatch::from_trajectories(&episodes.iter().collect::<Vec<_>>(), window);
        assert_eq!(eps_user.rows(), steps.len(), "user noise rows");
        assert_eq!(eps_rec.rows(), steps.len(), "recommender noise rows");
        Self {
            episodes,
            context_sources,
            steps,
            eps_context,
            eps_user,
            eps_rec,
        }
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_rows(&self) -> usize {
        self.steps.len()
    }

    pub fn context_refs(&self) -> Vec<&Trajectory> {
        self.context_sources.iter().collect()
    }
}

/// Splits by user id (never by step). All trajectories of one user land on
/// the same side.
pub fn split_users(
    trajectories: &[Trajectory],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let users: BTreeSet<UserId> = trajectories.iter().map(|t| t.user_id).collect();
    let mut users: Vec<UserId> = users.into_iter().collect();
    users.shuffle(&mut rng::stream(seed, tag::SPLIT, 0));
    let n_train = libm::round(train_frac * users.len() as f64) as usize;
    if n_train == 0 || n_train == users.len() {
        return Err(Error::InvalidArgument(format!(
            "split of {} users at {train_frac} leaves one side empty",
            users.len()
        )));
    }
    let train: BTreeSet<UserId> = users[..n_train].iter().copied().collect();
    let (a, b): (Vec<_>, Vec<_>) = trajectories
        .iter()
        .cloned()
        .partition(|t| train.contains(&t.user_id));
    Ok((a, b))
}
