//! Meta-training schedule, one-shot adaptation at meta-test time, and the
//! empirical model-error probe.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::config::{Ablations, ModelConfig, RecData, RolloutSlates, TrainSchedule, UpdateParams};
use crate::context::{ContextEncoder, UserContext};
use crate::data::{make_state, EpisodeBatch, ItemEmbeddings, ItemId, State, StepRecord, Trajectory};
use crate::diffcore::{standard_normal_matrix, Matrix, Tape};
use crate::envsim::{sample_categorical, EnvState, SlatePolicy, Simulator, UserPool};
use crate::evalmetrics::Reranker;
use crate::math;
use crate::mireg::{mi_update, StatisticsNetwork};
use crate::recagent::{rec_pg_update, slate_from_scores, RecAgent, SlateMode};
use crate::rng::{self, tag, Rng};
use crate::usermodel::{
    discriminator_log_odds, discriminator_update, recovered_rewards, user_mle_pretrain, user_mle_step,
    user_policy_pg_update, Discriminator, UserModel,
};
use crate::{Error, Result};

/// Every learned component, plus the item embeddings they share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub model: ModelConfig,
    pub embeddings: ItemEmbeddings,
    pub context: ContextEncoder,
    pub user: UserModel,
    pub disc: Discriminator,
    pub agent: RecAgent,
    pub stats: StatisticsNetwork,
}

impl Networks {
    pub fn new(model: &ModelConfig, embeddings: ItemEmbeddings, seed: u64) -> Result<Self> {
        model.validate()?;
        let d = embeddings.dim();
        let mut r = rng::stream(seed, tag::INIT, 0);
        Ok(Self {
            model: model.clone(),
            context: ContextEncoder::new(model, d, &mut r)?,
            user: UserModel::new(model, d, &mut r)?,
            disc: Discriminator::new(model, d, &mut r)?,
            agent: RecAgent::new(model, d, &mut r)?,
            stats: StatisticsNetwork::new(model, &mut r)?,
            embeddings,
        })
    }

    pub fn window(&self) -> usize {
        self.model.window
    }

    /// Context inferred from `trajectory`, or the prior with a zero sample
    /// when context is disabled or the trajectory is empty.
    pub fn infer_context(&self, trajectory: &Trajectory, use_context: bool, rng: &mut Rng) -> UserContext {
        if !use_context || trajectory.is_empty() {
            return UserContext::prior(self.model.d_context);
        }
        self.context.encode(trajectory, &self.embeddings, rng)
    }

    /// Agent catalog scores at the posterior mean of `z_rec`.
    pub fn rec_scores(&self, state: &State, c: &[f64]) -> Result<Vec<f64>> {
        let z = self
            .agent
            .policy
            .infer(state, c, &self.embeddings, &alloc::vec![0.0; self.model.d_latent])?
            .sample;
        self.agent.catalog_scores(&z, &self.embeddings)
    }

    /// User-model click distribution over `slate` at the posterior mean
    /// of `z_u`.
    pub fn user_choice_probs(&self, state: &State, c: &[f64], slate: &[ItemId]) -> Result<Vec<f64>> {
        let z = self
            .user
            .policy
            .infer(state, c, &self.embeddings, &alloc::vec![0.0; self.model.d_latent])?
            .sample;
        self.user.policy_probs(&z, slate, &self.embeddings)
    }
}

/// Scalars of one outer iteration. Phase values are means over the
/// phase's minibatches; skipped phases report `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub disc_loss: Option<f64>,
    pub user_pg_loss: Option<f64>,
    pub user_elbo: Option<f64>,
    pub pseudo_reward: Option<f64>,
    pub rec_pg_loss: Option<f64>,
    pub rec_elbo: Option<f64>,
    /// Mean per-step reward the agent trained on (recovered or logged).
    pub model_reward: Option<f64>,
    pub mi_bound: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub pretrain_loss: Vec<f64>,
    pub iterations: Vec<IterationMetrics>,
}

/// Trajectory indices grouped by user, for drawing context sources.
struct ContextPicker {
    by_user: BTreeMap<u64, Vec<usize>>,
}

impl ContextPicker {
    fn new(trajectories: &[Trajectory]) -> Self {
        let mut by_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, t) in trajectories.iter().enumerate() {
            by_user.entry(t.user_id).or_default().push(i);
        }
        Self { by_user }
    }

    /// Another trajectory of the same user when one exists, else `i`.
    fn pick(&self, trajectories: &[Trajectory], i: usize, rng: &mut Rng) -> usize {
        let same = &self.by_user[&trajectories[i].user_id];
        if same.len() < 2 {
            return i;
        }
        loop {
            let j = same[index::sample(rng, same.len(), 1).index(0)];
            if j != i {
                return j;
            }
        }
    }
}

fn offline_batch(
    model: &ModelConfig,
    data: &[Trajectory],
    idx: &[usize],
    picker: &ContextPicker,
    rng: &mut Rng,
) -> EpisodeBatch {
    let episodes: Vec<Trajectory> = idx.iter().map(|&i| data[i].clone()).collect();
    let sources: Vec<Trajectory> = idx.iter().map(|&i| data[picker.pick(data, i, rng)].clone()).collect();
    EpisodeBatch::new(episodes, sources, model.window, model.d_context, model.d_latent, rng)
}

/// Sampled contexts for a set of source trajectories, frozen encoder.
fn context_samples(nets: &Networks, sources: &[&Trajectory], eps: &Matrix, use_context: bool) -> Matrix {
    let mut tape = Tape::new();
    let table = nets.embeddings.bind(&mut tape, false);
    let net = nets.context.net().bind_frozen(&mut tape);
    let cv = nets.context.encode_tape(&net, &mut tape, table, sources, eps.clone(), use_context);
    tape.value(cv.sample).clone()
}

/// Model rollouts: the user model clicks on slates from the agent
/// (sampled, Plackett–Luce) or from the logged trajectory at the same
/// step. Each rollout is conditioned on, and as long as, its source
/// trajectory. Rewards are left at zero.
pub fn model_rollouts(
    nets: &Networks,
    sources: &[Trajectory],
    k: usize,
    slates: RolloutSlates,
    use_context: bool,
    rng: &mut Rng,
) -> Result<EpisodeBatch> {
    let n = sources.len();
    let (w, dc, dz) = (nets.window(), nets.model.d_context, nets.model.d_latent);
    let lens: Vec<usize> = sources.iter().map(Trajectory::len).collect();
    let offsets: Vec<usize> = lens
        .iter()
        .scan(0, |acc, &l| {
            let o = *acc;
            *acc += l;
            Some(o)
        })
        .collect();
    let rows: usize = lens.iter().sum();
    let eps_context = standard_normal_matrix(rng, n, dc);
    let eps_user = standard_normal_matrix(rng, rows, dz);
    let eps_rec = standard_normal_matrix(rng, rows, dz);
    let c = context_samples(nets, &sources.iter().collect::<Vec<_>>(), &eps_context, use_context);

    let mut episodes: Vec<Trajectory> = sources.iter().map(|s| Trajectory::new(s.user_id)).collect();
    let mut states: Vec<State> = (0..n).map(|_| make_state(&[], w)).collect();
    let table = nets.embeddings.table();
    let horizon = lens.iter().copied().max().unwrap_or(0);
    for t in 0..horizon {
        let active: Vec<usize> = (0..n).filter(|&i| t < lens[i]).collect();
        let feats: Vec<Vec<f64>> = active.iter().map(|&i| states[i].featurize(table)).collect();
        let s = Matrix::from_rows(&feats);
        let cm = c.gather_rows(&active);
        let rows_t: Vec<usize> = active.iter().map(|&i| offsets[i] + t).collect();
        let slates_t: Vec<Vec<ItemId>> = match slates {
            RolloutSlates::Agent => {
                let (_, z) = nets.agent.policy.latent_batch(&s, &cm, &eps_rec.gather_rows(&rows_t))?;
                let q = nets.agent.policy.query_batch(&z)?;
                let scores = q.matmul_t(table);
                (0..active.len())
                    .map(|r| slate_from_scores(scores.row(r), k, SlateMode::Sample, rng).map(|a| a.items))
                    .collect::<Result<_>>()?
            }
            RolloutSlates::Logged => active.iter().map(|&i| sources[i].steps[t].slate.clone()).collect(),
        };
        let (_, zu) = nets.user.policy.latent_batch(&s, &cm, &eps_user.gather_rows(&rows_t))?;
        let qu = nets.user.policy.query_batch(&zu)?;
        for (r, &i) in active.iter().enumerate() {
            let slate = &slates_t[r];
            let scores: Vec<f64> = slate.iter().map(|&x| math::dot(qu.row(r), table.row(x))).collect();
            let click = slate[sample_categorical(&math::softmax(&scores), rng)];
            episodes[i].steps.push(StepRecord {
                slate: slate.clone(),
                click,
                reward: 0.0,
            });
            states[i] = states[i].advance(click);
        }
    }
    Ok(EpisodeBatch::with_noise(
        episodes,
        sources.to_vec(),
        w,
        eps_context,
        eps_user,
        eps_rec,
    ))
}

fn diverged(iteration: usize, phase: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient => Error::Diverged {
            iteration,
            phase,
            detail: format!("{e}"),
        },
        other => other,
    }
}

fn minibatches(idx: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    idx.chunks(size.max(1))
}

fn mean_of(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(math::mean(v))
    }
}

/// Runs the warm-start and the alternating outer loop. `k` is the slate
/// size of agent rollouts. Deterministic given `seed`.
pub fn meta_train(
    nets: &mut Networks,
    schedule: &TrainSchedule,
    ablations: &Ablations,
    train: &[Trajectory],
    k: usize,
    seed: u64,
) -> Result<TrainReport> {
    schedule.validate()?;
    if train.iter().all(Trajectory::is_empty) {
        return Err(Error::EmptyBatch("meta_train: no offline steps"));
    }
    let data: Vec<Trajectory> = train.iter().filter(|t| !t.is_empty()).cloned().collect();
    let hp = UpdateParams::new(schedule, ablations);
    let picker = ContextPicker::new(&data);
    let mut rng = rng::stream(seed, tag::TRAIN, 0);
    let mut report = TrainReport::default();
    let all: Vec<usize> = (0..data.len()).collect();
    let bs = schedule.batch_users;

    if !ablations.model_free {
        let Networks {
            model,
            user,
            context,
            embeddings,
            ..
        } = nets;
        let mut order = all.clone();
        report.pretrain_loss = user_mle_pretrain(user, context, embeddings, schedule.pretrain_epochs, &hp, |_| {
            order.shuffle(&mut rng);
            minibatches(&order, bs)
                .map(|b| offline_batch(model, &data, b, &picker, &mut rng))
                .collect()
        })
        .map_err(diverged(0, "pretrain"))?;
    }

    for it in 0..schedule.n_outer_iters {
        let mut m = IterationMetrics {
            iteration: it + 1,
            ..Default::default()
        };
        let users: Vec<usize> = if schedule.users_per_iter == 0 || schedule.users_per_iter >= data.len() {
            let mut u = all.clone();
            u.shuffle(&mut rng);
            u
        } else {
            index::sample(&mut rng, data.len(), schedule.users_per_iter).into_vec()
        };

        if !ablations.model_free {
            let mut losses = Vec::new();
            for _ in 0..schedule.disc_epochs {
                for b in minibatches(&users, bs) {
                    let truth = offline_batch(&nets.model, &data, b, &picker, &mut rng);
                    let model = model_rollouts(nets, &truth.episodes, k, schedule.rollout_slates, hp.use_context, &mut rng)?;
                    let l = discriminator_update(&mut nets.disc, &nets.user, &nets.context, &nets.embeddings, &truth, &model, &hp)
                        .map_err(diverged(it + 1, "discriminator"))?;
                    losses.push(l);
                }
            }
            m.disc_loss = mean_of(&losses);

            let (mut pgl, mut el, mut pr) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..schedule.user_pg_epochs {
                for b in minibatches(&users, bs) {
                    let truth = offline_batch(&nets.model, &data, b, &picker, &mut rng);
                    let model = model_rollouts(nets, &truth.episodes, k, schedule.rollout_slates, hp.use_context, &mut rng)?;
                    let s = user_policy_pg_update(
                        &mut nets.user,
                        &mut nets.context,
                        &nets.disc,
                        &nets.embeddings,
                        &model,
                        &truth,
                        &hp,
                    )
                    .map_err(diverged(it + 1, "user_pg"))?;
                    pgl.push(s.pg_loss);
                    el.push(s.elbo_loss);
                    pr.push(s.mean_pseudo_reward);
                }
            }
            m.user_pg_loss = mean_of(&pgl);
            m.user_elbo = mean_of(&el);
            m.pseudo_reward = mean_of(&pr);
        }

        let offline_rec = ablations.model_free || schedule.rec_data == RecData::Offline;
        let (mut rl, mut re, mut mr) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..schedule.rec_pg_epochs {
            for b in minibatches(&users, bs) {
                let truth = offline_batch(&nets.model, &data, b, &picker, &mut rng);
                let (batch, rewards, mode) = if offline_rec {
                    let r = truth.steps.rewards.clone();
                    (truth, r, RecData::Offline)
                } else {
                    let model = model_rollouts(nets, &truth.episodes, k, RolloutSlates::Agent, hp.use_context, &mut rng)?;
                    let r = recovered_rewards(&nets.disc, &nets.context, &nets.embeddings, &model, &hp);
                    (model, r, RecData::Model)
                };
                let s = rec_pg_update(&mut nets.agent, &mut nets.context, &nets.embeddings, &batch, &rewards, mode, &hp)
                    .map_err(diverged(it + 1, "rec_pg"))?;
                rl.push(s.pg_loss);
                re.push(s.elbo_loss);
                mr.push(s.mean_reward);
            }
        }
        m.rec_pg_loss = mean_of(&rl);
        m.rec_elbo = mean_of(&re);
        m.model_reward = mean_of(&mr);

        if !ablations.no_mi && !ablations.model_free {
            let mut bounds = Vec::new();
            for _ in 0..schedule.mi_epochs {
                for b in minibatches(&users, bs) {
                    let truth = offline_batch(&nets.model, &data, b, &picker, &mut rng);
                    if truth.n_rows() < 2 {
                        continue;
                    }
                    let s = mi_update(
                        &mut nets.stats,
                        &mut nets.user,
                        &mut nets.agent,
                        &mut nets.context,
                        &nets.embeddings,
                        &truth,
                        &hp,
                        &mut rng,
                    )
                    .map_err(diverged(it + 1, "mi"))?;
                    bounds.push(s.bound);
                }
            }
            m.mi_bound = mean_of(&bounds);
        }
        report.iterations.push(m);
    }
    Ok(report)
}

/// Conditioned policies for one user, with no parameter change.
#[derive(Clone, Debug)]
pub struct AdaptedUser {
    pub context: UserContext,
    /// Set when the trajectory was empty and the prior was used.
    pub used_prior: bool,
}

/// One-shot adaptation: infer the context from a single trajectory.
pub fn meta_test_adapt(nets: &Networks, trajectory: &Trajectory, use_context: bool, rng: &mut Rng) -> AdaptedUser {
    AdaptedUser {
        context: nets.infer_context(trajectory, use_context, rng),
        used_prior: trajectory.is_empty() || !use_context,
    }
}

/// The trained agent as a simulator policy: context from the warm-up
/// trajectory, greedy (or sampled) slates at the mean `z_rec`.
pub struct LearnedRecPolicy<'a> {
    pub nets: &'a Networks,
    pub use_context: bool,
    pub mode: SlateMode,
    context: Vec<f64>,
}

impl<'a> LearnedRecPolicy<'a> {
    pub fn new(nets: &'a Networks, use_context: bool, mode: SlateMode) -> Self {
        Self {
            nets,
            use_context,
            mode,
            context: alloc::vec![0.0; nets.model.d_context],
        }
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }
}

impl SlatePolicy for LearnedRecPolicy<'_> {
    fn adapt(&mut self, warmup: &Trajectory, rng: &mut Rng) -> Result<()> {
        self.context = meta_test_adapt(self.nets, warmup, self.use_context, rng).context.sample;
        Ok(())
    }

    fn propose(&mut self, _: &Simulator, state: &EnvState, k: usize, rng: &mut Rng) -> Result<Vec<ItemId>> {
        let s = make_state(&state.history, self.nets.window());
        let scores = self.nets.rec_scores(&s, &self.context)?;
        Ok(slate_from_scores(&scores, k, self.mode, rng)?.items)
    }
}

impl Reranker for LearnedRecPolicy<'_> {
    fn adapt(&mut self, context: &Trajectory, rng: &mut Rng) -> Result<()> {
        SlatePolicy::adapt(self, context, rng)
    }

    fn score(&mut self, state: &State, candidates: &[ItemId], _: &mut Rng) -> Result<Vec<f64>> {
        let scores = self.nets.rec_scores(state, &self.context)?;
        Ok(candidates.iter().map(|&i| scores[i]).collect())
    }
}

/// A user-choice model compared against the simulator's true users.
pub trait ChoiceModel {
    fn adapt(&mut self, _warmup: &Trajectory, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }
    fn choice_probs(&mut self, sim: &Simulator, state: &EnvState, slate: &[ItemId]) -> Result<Vec<f64>>;
}

/// The simulator's own choice probabilities.
pub struct TrueChoiceModel;

impl ChoiceModel for TrueChoiceModel {
    fn choice_probs(&mut self, sim: &Simulator, state: &EnvState, slate: &[ItemId]) -> Result<Vec<f64>> {
        sim.choice_probs(&state.user, slate)
    }
}

pub struct UniformChoiceModel;

impl ChoiceModel for UniformChoiceModel {
    fn choice_probs(&mut self, _: &Simulator, _: &EnvState, slate: &[ItemId]) -> Result<Vec<f64>> {
        Ok(alloc::vec![1.0 / slate.len() as f64; slate.len()])
    }
}

/// The learned user model at the mean `z_u`, conditioned on the warm-up
/// trajectory's context.
pub struct LearnedChoiceModel<'a> {
    pub nets: &'a Networks,
    pub use_context: bool,
    context: Vec<f64>,
}

impl<'a> LearnedChoiceModel<'a> {
    pub fn new(nets: &'a Networks, use_context: bool) -> Self {
        Self {
            nets,
            use_context,
            context: alloc::vec![0.0; nets.model.d_context],
        }
    }
}

impl ChoiceModel for LearnedChoiceModel<'_> {
    fn adapt(&mut self, warmup: &Trajectory, rng: &mut Rng) -> Result<()> {
        self.context = meta_test_adapt(self.nets, warmup, self.use_context, rng).context.sample;
        Ok(())
    }

    fn choice_probs(&mut self, _: &Simulator, state: &EnvState, slate: &[ItemId]) -> Result<Vec<f64>> {
        let s = make_state(&state.history, self.nets.window());
        self.nets.user_choice_probs(&s, &self.context, slate)
    }
}

/// Mean over visited `(s, A)` of `KL(true choice ‖ learned choice)`, with
/// `policy` acting in the true environment on test users `0..n_users`
/// for `horizon` steps after the same warm-up as online evaluation.
pub fn model_error_probe(
    sim: &Simulator,
    policy: &mut dyn SlatePolicy,
    learned: &mut dyn ChoiceModel,
    n_users: usize,
    horizon: usize,
    k: usize,
    eval_seed: u64,
) -> Result<f64> {
    let mut logging = sim.logging_policy();
    let cfg = sim.config();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n_users {
        let (warmup, end) = sim.logged_episode(UserPool::Test, i, cfg.episode_len, cfg.slate_size, &mut logging)?;
        let mut r = rng::stream(eval_seed, tag::PROBE, i as u64);
        policy.adapt(&warmup, &mut r)?;
        learned.adapt(&warmup, &mut r)?;
        let mut state = EnvState::new(end.user);
        for _ in 0..horizon {
            let slate = policy.propose(sim, &state, k, &mut r)?;
            let p = sim.choice_probs(&state.user, &slate)?;
            let q = learned.choice_probs(sim, &state, &slate)?;
            total += math::categorical_kl(&p, &q);
            count += 1;
            sim.env_step(&mut state, &slate, &mut r)?;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch("model_error_probe"));
    }
    Ok(total / count as f64)
}

/// Fraction of held-out steps where the user model's most likely click
/// is the logged click; context from the first half of each trajectory,
/// prediction on the second half.
pub fn user_top1_accuracy(nets: &Networks, trajectories: &[Trajectory], use_context: bool, seed: u64) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, t) in trajectories.iter().enumerate() {
        let n_ctx = t.len().div_ceil(2);
        let mut r = rng::stream(seed, tag::EVAL, i as u64);
        let c = nets.infer_context(&t.prefix(n_ctx), use_context, &mut r).sample;
        let history: Vec<ItemId> = t.steps[..n_ctx].iter().map(|s| s.click).collect();
        let mut state = make_state(&history, nets.window());
        for step in &t.steps[n_ctx..] {
            let p = nets.user_choice_probs(&state, &c, &step.slate)?;
            let best = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
            hits += usize::from(step.slate[best] == step.click);
            total += 1;
            state = state.advance(step.click);
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch("user_top1_accuracy"));
    }
    Ok(hits as f64 / total as f64)
}

/// Discriminator loss on offline trajectories against fresh model
/// rollouts for the same users, without updating anything.
pub fn held_out_discriminator_loss(
    nets: &Networks,
    trajectories: &[Trajectory],
    k: usize,
    slates: RolloutSlates,
    hp: &UpdateParams,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, tag::EVAL, u64::MAX);
    let data: Vec<Trajectory> = trajectories.iter().filter(|t| !t.is_empty()).cloned().collect();
    let truth = EpisodeBatch::new(
        data.clone(),
        data.clone(),
        nets.window(),
        nets.model.d_context,
        nets.model.d_latent,
        &mut rng,
    );
    let model = model_rollouts(nets, &data, k, slates, hp.use_context, &mut rng)?;
    let (ld, _) = discriminator_log_odds(&nets.disc, &nets.user, &nets.context, &nets.embeddings, &truth, hp);
    let (_, l1) = discriminator_log_odds(&nets.disc, &nets.user, &nets.context, &nets.embeddings, &model, hp);
    Ok(-math::mean(&ld) - math::mean(&l1))
}

/// The user-model warm-start loss on `trajectories` with fixed noise.
pub fn user_mle_loss(nets: &Networks, trajectories: &[Trajectory], hp: &UpdateParams, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, tag::EVAL, u64::MAX - 1);
    let b = EpisodeBatch::new(
        trajectories.to_vec(),
        trajectories.to_vec(),
        nets.window(),
        nets.model.d_context,
        nets.model.d_latent,
        &mut rng,
    );
    let mut n = nets.clone();
    user_mle_step(&mut n.user, &mut n.context, &mut n.embeddings, &b, hp, false)
}

/// A one-line summary of a training report.
pub fn summarize(report: &TrainReport) -> String {
    match report.iterations.last() {
        Some(m) => format!(
            "iterations {} disc {:?} mi {:?} model_reward {:?}",
            report.iterations.len(),
            m.disc_loss,
            m.mi_bound,
            m.model_reward
        ),
        None => format!("pretrain epochs {}", report.pretrain_loss.len()),
    }
}

/// Context sample of a trajectory under `seed` (for inspection).
pub fn context_sample(nets: &Networks, trajectory: &Trajectory, use_context: bool, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, tag::EVAL, 0);
    nets.infer_context(trajectory, use_context, &mut r).sample
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use crate::diffcore::Activation;
    use alloc::vec;

    fn small_sim(seed: u64) -> Simulator {
        let cfg = SimConfig {
            n_items: 12,
            d_item: 4,
            n_clusters: 2,
            episode_len: 5,
            slate_size: 3,
            n_train_users: 30,
            n_test_users: 10,
            ..SimConfig::default()
        };
        Simulator::new(cfg, seed).unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            window: 3,
            d_context: 2,
            d_latent: 2,
            hidden: vec![8],
            activation: Activation::Tanh,
        }
    }

    fn schedule(iters: usize) -> TrainSchedule {
        TrainSchedule {
            pretrain_epochs: 2,
            n_outer_iters: iters,
            users_per_iter: 0,
            batch_users: 8,
            lr: 1e-2,
            ..TrainSchedule::default()
        }
    }

    fn setup(seed: u64) -> (Simulator, Vec<Trajectory>, Networks) {
        let sim = small_sim(seed);
        let mut lp = sim.logging_policy();
        let train = sim.generate_offline_logs(UserPool::Train, 30, 5, 3, &mut lp).unwrap();
        let emb = ItemEmbeddings::fixed(sim.catalog().embeddings().clone());
        let nets = Networks::new(&small_model(), emb, seed).unwrap();
        (sim, train, nets)
    }

    #[test]
    fn same_seed_same_result() {
        let (_, train, nets) = setup(3);
        let (mut a, mut b) = (nets.clone(), nets);
        let ra = meta_train(&mut a, &schedule(2), &Ablations::default(), &train, 3, 9).unwrap();
        let rb = meta_train(&mut b, &schedule(2), &Ablations::default(), &train, 3, 9).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(ra.iterations.len(), 2);
        assert!(ra.iterations.iter().all(|m| m.mi_bound.is_some() && m.disc_loss.is_some()));
    }

    #[test]
    fn zero_outer_iterations_touch_only_the_user_side() {
        let (_, train, nets) = setup(4);
        let mut n = nets.clone();
        let r = meta_train(&mut n, &schedule(0), &Ablations::default(), &train, 3, 1).unwrap();
        assert!(r.iterations.is_empty());
        assert_eq!(r.pretrain_loss.len(), 2);
        assert_eq!(n.agent, nets.agent);
        assert_eq!(n.disc, nets.disc);
        assert_eq!(n.stats, nets.stats);
        assert_ne!(n.user, nets.user);
    }

    #[test]
    fn ablations_skip_their_phases() {
        let (_, train, nets) = setup(5);
        let mut n = nets.clone();
        let r = meta_train(&mut n, &schedule(1), &Ablations { no_mi: true, ..Default::default() }, &train, 3, 1).unwrap();
        assert!(r.iterations[0].mi_bound.is_none());
        assert_eq!(n.stats, nets.stats);

        let mut n = nets.clone();
        let free = Ablations {
            model_free: true,
            ..Default::default()
        };
        let r = meta_train(&mut n, &schedule(1), &free, &train, 3, 1).unwrap();
        let m = &r.iterations[0];
        assert!(r.pretrain_loss.is_empty());
        assert!(m.disc_loss.is_none() && m.user_pg_loss.is_none() && m.mi_bound.is_none());
        assert!(m.rec_pg_loss.is_some() && m.model_reward.is_some());
        assert_eq!(n.user, nets.user);
        assert_eq!(n.disc, nets.disc);
        assert_ne!(n.agent, nets.agent);
    }

    #[test]
    fn divergence_aborts_with_report() {
        let (_, train, mut nets) = setup(6);
        let s = TrainSchedule {
            lr: 1e300,
            pretrain_epochs: 0,
            ..schedule(3)
        };
        match meta_train(&mut nets, &s, &Ablations::default(), &train, 3, 1) {
            Err(Error::Diverged { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rollouts_follow_their_sources() {
        let (_, train, nets) = setup(7);
        let mut r = rng::stream(1, tag::TRAIN, 0);
        let src = &train[..4];
        let b = model_rollouts(&nets, src, 3, RolloutSlates::Logged, true, &mut r).unwrap();
        for (e, s) in b.episodes.iter().zip(src) {
            assert_eq!(e.len(), s.len());
            for (a, l) in e.steps.iter().zip(&s.steps) {
                assert_eq!(a.slate, l.slate);
                assert!(a.slate.contains(&a.click));
            }
        }
        let b = model_rollouts(&nets, src, 3, RolloutSlates::Agent, true, &mut r).unwrap();
        assert_eq!(b.n_rows(), src.iter().map(Trajectory::len).sum::<usize>());
        assert!(b.episodes.iter().flat_map(|e| &e.steps).all(|s| s.slate.len() == 3 && s.slate.contains(&s.click)));
    }

    #[test]
    fn adaptation_is_deterministic_and_falls_back_to_prior() {
        let (_, train, nets) = setup(8);
        let mut r1 = rng::stream(2, tag::EVAL, 0);
        let mut r2 = rng::stream(2, tag::EVAL, 0);
        let a = meta_test_adapt(&nets, &train[0], true, &mut r1);
        let b = meta_test_adapt(&nets, &train[0], true, &mut r2);
        assert_eq!(a.context.sample, b.context.sample);
        assert!(!a.used_prior);
        let e = meta_test_adapt(&nets, &Trajectory::new(0), true, &mut r1);
        assert!(e.used_prior);
        assert_eq!(e.context.sample, vec![0.0; 2]);
        let off = meta_test_adapt(&nets, &train[0], false, &mut r1);
        assert_eq!(off.context.posterior, UserContext::prior(2).posterior);
    }

    #[test]
    fn no_context_policy_holds_the_prior() {
        let (sim, train, nets) = setup(9);
        let mut p = LearnedRecPolicy::new(&nets, false, SlateMode::Greedy);
        SlatePolicy::adapt(&mut p, &train[0], &mut rng::stream(0, 0, 0)).unwrap();
        assert!(p.context().iter().all(|&x| x == 0.0));
        let rep = sim.evaluate_online(&mut p, 3, 4, 3, 1).unwrap();
        assert_eq!(rep.per_user.len(), 3);
    }

    struct FixedSlate(Vec<ItemId>);

    impl SlatePolicy for FixedSlate {
        fn propose(&mut self, _: &Simulator, _: &EnvState, _: usize, _: &mut Rng) -> Result<Vec<ItemId>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn probe_is_zero_for_the_true_model() {
        let sim = small_sim(10);
        let mut pol = crate::envsim::OraclePolicy;
        let l = model_error_probe(&sim, &mut pol, &mut TrueChoiceModel, 5, 6, 3, 2).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn probe_against_uniform_matches_analytic_kl() {
        let sim = small_sim(11);
        let slate = vec![0, 4, 7];
        let l = model_error_probe(&sim, &mut FixedSlate(slate.clone()), &mut UniformChoiceModel, 4, 5, 3, 3).unwrap();
        let cfg = sim.config();
        let mut lp = sim.logging_policy();
        let mut kls = Vec::new();
        for i in 0..4 {
            let (_, end) = sim.logged_episode(UserPool::Test, i, cfg.episode_len, cfg.slate_size, &mut lp).unwrap();
            let mut r = rng::stream(3, tag::PROBE, i as u64);
            let mut st = EnvState::new(end.user);
            for _ in 0..5 {
                let p = sim.choice_probs(&st.user, &slate).unwrap();
                kls.push(p.iter().map(|&x| x * math::ln(x)).sum::<f64>() + math::ln(3.0));
                sim.env_step(&mut st, &slate, &mut r).unwrap();
            }
        }
        assert!((l - math::mean(&kls)).abs() < 1e-12, "{l} vs {}", math::mean(&kls));
        assert!(l > 0.0);
    }

    #[test]
    fn top1_accuracy_and_losses_are_well_formed() {
        let (_, train, nets) = setup(12);
        let acc = user_top1_accuracy(&nets, &train[..10], true, 1).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let l = held_out_discriminator_loss(&nets, &train[..10], 3, RolloutSlates::Logged, &UpdateParams::default(), 1).unwrap();
        // Zero-output reward and an untrained shaping net: g is small, so D is near a half.
        assert!(l.is_finite() && l > 0.0);
        assert!(user_mle_loss(&nets, &train[..10], &UpdateParams::default(), 1).unwrap().is_finite());
    }
}
