//! Recommendation agent `π_θ(A | s, c)`: the same latent-variable layout
//! as the user model, with a Plackett–Luce slate policy over the catalog.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RecData, UpdateParams};
use crate::context::ContextEncoder;
use crate::data::{EpisodeBatch, ItemEmbeddings, ItemId, State};
use crate::diffcore::{plackett_luce_log_prob_row, Matrix, Tape};
use crate::envsim::{sample_categorical, top_k};
use crate::math;
use crate::pg;
use crate::rng::Rng;
use crate::usermodel::VariationalPolicy;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlateMode {
    Sample,
    Greedy,
}

/// An ordered slate and its log-probability under the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct SlateAction {
    pub items: Vec<ItemId>,
    pub log_prob: f64,
}

/// Sequential sampling without replacement from renormalized softmax
/// scores (`Sample`), or the top `k` scores with ties to the lowest id
/// (`Greedy`).
pub fn slate_from_scores(scores: &[f64], k: usize, mode: SlateMode, rng: &mut Rng) -> Result<SlateAction> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "slate size {k} not in 1..={}",
            scores.len()
        )));
    }
    let items = match mode {
        SlateMode::Greedy => top_k(scores, k),
        SlateMode::Sample => {
            let mut remaining: Vec<ItemId> = (0..scores.len()).collect();
            let mut items = Vec::with_capacity(k);
            for _ in 0..k {
                let s: Vec<f64> = remaining.iter().map(|&i| scores[i]).collect();
                let j = sample_categorical(&math::softmax(&s), rng);
                items.push(remaining.remove(j));
            }
            items
        }
    };
    let log_prob = plackett_luce_log_prob_row(scores, &items);
    Ok(SlateAction { items, log_prob })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecAgent {
    pub policy: VariationalPolicy,
}

impl RecAgent {
    pub fn new(cfg: &ModelConfig, d_item: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            policy: VariationalPolicy::new(cfg, d_item, rng)?,
        })
    }

    /// Scores `⟨head(z), emb_i⟩` over the whole catalog.
    pub fn catalog_scores(&self, z_rec: &[f64], embeddings: &ItemEmbeddings) -> Result<Vec<f64>> {
        let q = self.policy.query_batch(&Matrix::row_vector(z_rec.to_vec()))?;
        Ok(embeddings.table().matmul_t(&q).into_vec())
    }

    pub fn propose_slate(
        &self,
        z_rec: &[f64],
        embeddings: &ItemEmbeddings,
        k: usize,
        mode: SlateMode,
        rng: &mut Rng,
    ) -> Result<SlateAction> {
        let scores = self.catalog_scores(z_rec, embeddings)?;
        slate_from_scores(&scores, k, mode, rng)
    }

    /// Probability of a click on `x` under a softmax restricted to `slate`.
    pub fn click_prob(&self, z_rec: &[f64], x: ItemId, slate: &[ItemId], embeddings: &ItemEmbeddings) -> Result<f64> {
        let pos = slate
            .iter()
            .position(|&i| i == x)
            .ok_or_else(|| Error::InvalidSlate(alloc::format!("item {x} not in slate")))?;
        Ok(self.policy.slate_probs(z_rec, slate, embeddings)?[pos])
    }

    /// `−ELBO` of the current state's features.
    pub fn elbo_loss(&self, s_t: &State, c: &[f64], embeddings: &ItemEmbeddings, beta: f64, eps: &[f64]) -> Result<f64> {
        self.policy.elbo_loss(s_t, s_t, c, embeddings, beta, eps)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RecPgStats {
    pub loss: f64,
    pub pg_loss: f64,
    pub elbo_loss: f64,
    pub mean_reward: f64,
}

/// REINFORCE step for the agent plus its ELBO on the batch states.
///
/// With `RecData::Model` the batch holds rollouts of the agent's sampled
/// slates and `rewards` are recovered rewards; the score function is the
/// slate's Plackett–Luce log-probability. With `RecData::Offline` the batch
/// holds logged steps and their observed rewards; the score function is
/// the log click probability of the logged click within its slate.
pub fn rec_pg_update(
    agent: &mut RecAgent,
    ctx: &mut ContextEncoder,
    emb: &ItemEmbeddings,
    batch: &EpisodeBatch,
    rewards: &[f64],
    data: RecData,
    hp: &UpdateParams,
) -> Result<RecPgStats> {
    if batch.n_rows() == 0 {
        return Err(Error::EmptyBatch("rec_pg_update"));
    }
    if rewards.len() != batch.n_rows() {
        return Err(Error::DimensionMismatch {
            what: "rec_pg_update rewards",
            expected: batch.n_rows(),
            got: rewards.len(),
        });
    }
    let returns = pg::returns_to_go(rewards, &batch.steps.trajectory, hp.gamma);
    let adv = pg::center_by_step(&returns, &batch.steps.t);

    let mut tape = Tape::new();
    let table = emb.bind(&mut tape, false);
    let ctx_net = ctx.net().bind(&mut tape);
    let ab = agent.policy.bind(&mut tape, true);
    let cv = ctx.encode_batch(&ctx_net, &mut tape, table, batch, hp.use_context);
    let c_rows = cv.per_row(&mut tape, &batch.steps.trajectory);
    let steps = batch.steps.bind(&mut tape, table);
    let lat = ab.latent(&mut tape, steps.state, c_rows, batch.eps_rec.clone());
    let q = ab.query(&mut tape, lat.z);
    let log_pi = match data {
        RecData::Model => tape.plackett_luce_log_prob(q, table, batch.steps.slates.clone()),
        RecData::Offline => tape.slate_log_prob(q, table, batch.steps.slates.clone(), batch.steps.clicks.clone()),
    };
    let pg_loss = pg::reinforce_loss(&mut tape, log_pi, adv);
    let target = tape.constant(tape.value(steps.state).clone());
    let elbo_rows = ab.elbo_rows(&mut tape, &lat, c_rows, target, hp.beta);
    let elbo = tape.mean(elbo_rows);
    let mut loss = tape.add(pg_loss, elbo);
    if hp.use_context {
        if let Some(reg) = cv.regularizer(&mut tape, hp.beta_context) {
            loss = tape.add(loss, reg);
        }
    }
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "rec_pg", node: loss.index() });
    }
    let grads = tape.backward(loss)?;
    agent.policy.optimizer_step(&ab.gradient(&tape, &grads), hp.lr)?;
    if hp.use_context {
        ctx.net_mut().optimizer_step(&ctx_net.gradient(&tape, &grads), hp.lr)?;
    }
    Ok(RecPgStats {
        loss: value,
        pg_loss: tape.scalar(pg_loss),
        elbo_loss: tape.scalar(elbo),
        mean_reward: math::mean(rewards),
    })
}
