//! Learned user model: a latent-variable click policy `π_φ(x | s, A, c)`
//! and the adversarial discriminator whose reward term is the recovered
//! user reward.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, UpdateParams};
use crate::context::ContextEncoder;
use crate::data::{validate_slate, EpisodeBatch, ItemEmbeddings, ItemId, State, StepVars};
use crate::diffcore::{
    kl_diag_gaussians_tape, split_gaussian, BoundApproximator, FunctionApproximator,
    GaussianPosterior, GaussianVars, Matrix, RaggedIds, Tape, Var, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::math;
use crate::pg;
use crate::rng::Rng;
use crate::{Error, Result};

/// Lower clamp on `D` and on `1 − D`.
pub const D_EPS: f64 = 1e-6;

/// Posterior over a policy latent and one reparameterized sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPolicyVariable {
    pub posterior: GaussianPosterior,
    pub sample: Vec<f64>,
}

/// Policy with a latent variable `z`: encoder `q(z | s, c)`, learned prior
/// `p(z | c)`, Gaussian decoder `p(· | z, c)` over state features, and a
/// head mapping `z` to a query vector scored against item embeddings.
///
/// Both the user model and the recommender use this layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalPolicy {
    encoder: FunctionApproximator,
    prior: FunctionApproximator,
    decoder: FunctionApproximator,
    head: FunctionApproximator,
    window: usize,
    d_item: usize,
    d_context: usize,
    d_latent: usize,
}

impl VariationalPolicy {
    pub fn new(cfg: &ModelConfig, d_item: usize, rng: &mut Rng) -> Result<Self> {
        let s = cfg.window * d_item;
        let (dc, dz) = (cfg.d_context, cfg.d_latent);
        Ok(Self {
            encoder: FunctionApproximator::new(&cfg.layers(s + dc, 2 * dz), cfg.activation, rng)?,
            prior: FunctionApproximator::new(&cfg.layers(dc, 2 * dz), cfg.activation, rng)?,
            decoder: FunctionApproximator::new(&cfg.layers(dz + dc, s), cfg.activation, rng)?,
            head: FunctionApproximator::new(&cfg.layers(dz, d_item), cfg.activation, rng)?,
            window: cfg.window,
            d_item,
            d_context: dc,
            d_latent: dz,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn d_item(&self) -> usize {
        self.d_item
    }

    pub fn d_context(&self) -> usize {
        self.d_context
    }

    pub fn d_latent(&self) -> usize {
        self.d_latent
    }

    pub fn state_dim(&self) -> usize {
        self.window * self.d_item
    }

    /// Encoder, prior, decoder and head, in parameter order.
    pub fn networks(&self) -> [&FunctionApproximator; 4] {
        [&self.encoder, &self.prior, &self.decoder, &self.head]
    }

    pub fn networks_mut(&mut self) -> [&mut FunctionApproximator; 4] {
        [&mut self.encoder, &mut self.prior, &mut self.decoder, &mut self.head]
    }

    pub fn parameter_count(&self) -> usize {
        self.networks().iter().map(|n| n.parameters().len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.networks()
            .iter()
            .flat_map(|n| n.parameters().iter().copied())
            .collect()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                what: "variational policy parameters",
                expected: self.parameter_count(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for n in self.networks_mut() {
            let len = n.parameters().len();
            n.parameters_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, train: bool) -> BoundPolicy {
        let b = |n: &FunctionApproximator, tape: &mut Tape| {
            if train {
                n.bind(tape)
            } else {
                n.bind_frozen(tape)
            }
        };
        BoundPolicy {
            encoder: b(&self.encoder, tape),
            prior: b(&self.prior, tape),
            decoder: b(&self.decoder, tape),
            head: b(&self.head, tape),
            d_latent: self.d_latent,
            state_dim: self.state_dim(),
        }
    }

    /// One optimizer step from a flat gradient laid out as
    /// [`VariationalPolicy::parameters`].
    pub fn optimizer_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                what: "variational policy gradient",
                expected: self.parameter_count(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let mut off = 0;
        for n in self.networks_mut() {
            let len = n.parameters().len();
            n.optimizer_step(&grad[off..off + len], lr)?;
            off += len;
        }
        Ok(())
    }

    /// Posterior `q(z | s, c)` for a batch of state feature rows and
    /// contexts, with its sample under noise `eps`.
    pub fn latent_batch(&self, states: &Matrix, contexts: &Matrix, eps: &Matrix) -> Result<(GaussianBatch, Matrix)> {
        let out = self.encoder.forward_batch(&Matrix::concat_cols(&[states, contexts]))?;
        let q = GaussianBatch::from_output(&out, self.d_latent);
        let z = q.sample(eps);
        Ok((q, z))
    }

    /// Query vectors `head(z)`, one row per latent row.
    pub fn query_batch(&self, z: &Matrix) -> Result<Matrix> {
        self.head.forward_batch(z)
    }

    /// `q(z | s, c)` and a sample for a single state.
    pub fn infer(
        &self,
        state: &State,
        c: &[f64],
        embeddings: &ItemEmbeddings,
        eps: &[f64],
    ) -> Result<LatentPolicyVariable> {
        let s = Matrix::row_vector(state.featurize(embeddings.table()));
        let c = Matrix::row_vector(c.to_vec());
        let e = Matrix::row_vector(eps.to_vec());
        let (q, z) = self.latent_batch(&s, &c, &e)?;
        Ok(LatentPolicyVariable {
            posterior: q.row(0),
            sample: z.row(0).to_vec(),
        })
    }

    /// Softmax of `⟨head(z), emb_i⟩` over `slate`.
    pub fn slate_probs(&self, z: &[f64], slate: &[ItemId], embeddings: &ItemEmbeddings) -> Result<Vec<f64>> {
        validate_slate(slate)?;
        let q = self.head.forward(z)?;
        let scores = item_scores(&q, slate, embeddings)?;
        Ok(math::softmax(&scores))
    }

    /// Single-instance ELBO loss with reconstruction target `target`
    /// (features of some state), noise `eps` and KL weight `beta`.
    pub fn elbo_loss(
        &self,
        state: &State,
        target: &State,
        c: &[f64],
        embeddings: &ItemEmbeddings,
        beta: f64,
        eps: &[f64],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let s = tape.constant(Matrix::row_vector(state.featurize(embeddings.table())));
        let t = tape.constant(Matrix::row_vector(target.featurize(embeddings.table())));
        let c = tape.constant(Matrix::row_vector(c.to_vec()));
        let lat = b.latent(&mut tape, s, c, Matrix::row_vector(eps.to_vec()));
        let l = b.elbo_rows(&mut tape, &lat, c, t, beta);
        Ok(tape.value(l).item())
    }
}

pub(crate) fn check_items(slate: &[ItemId], n_items: usize) -> Result<()> {
    match slate.iter().find(|&&i| i >= n_items) {
        Some(i) => Err(Error::InvalidSlate(alloc::format!("item {i} outside catalog of {n_items}"))),
        None => Ok(()),
    }
}

/// Scores `⟨query, emb_i⟩` for each item of `slate`.
pub(crate) fn item_scores(query: &[f64], slate: &[ItemId], embeddings: &ItemEmbeddings) -> Result<Vec<f64>> {
    check_items(slate, embeddings.n_items())?;
    Ok(slate.iter().map(|&i| math::dot(query, embeddings.table().row(i))).collect())
}

/// A batch of diagonal Gaussians held as plain matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBatch {
    pub mean: Matrix,
    pub log_std: Matrix,
}

impl GaussianBatch {
    fn from_output(out: &Matrix, dim: usize) -> Self {
        let log_std = out
            .slice_cols(dim, dim)
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Self {
            mean: out.slice_cols(0, dim),
            log_std,
        }
    }

    pub fn sample(&self, eps: &Matrix) -> Matrix {
        let noise = self.log_std.zip_map(eps, |ls, e| math::exp(ls) * e);
        self.mean.zip_map(&noise, |m, n| m + n)
    }

    pub fn row(&self, r: usize) -> GaussianPosterior {
        GaussianPosterior::new(self.mean.row(r).to_vec(), self.log_std.row(r).to_vec())
            .expect("finite clamped rows")
    }
}

/// Latent posterior, learned prior and sample on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub q: GaussianVars,
    pub prior: GaussianVars,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct BoundPolicy {
    encoder: BoundApproximator,
    prior: BoundApproximator,
    decoder: BoundApproximator,
    head: BoundApproximator,
    d_latent: usize,
    state_dim: usize,
}

impl BoundPolicy {
    pub fn latent(&self, tape: &mut Tape, state: Var, c: Var, eps: Matrix) -> LatentVars {
        let x = tape.concat_cols(&[state, c]);
        let qo = self.encoder.forward(tape, x);
        let q = split_gaussian(tape, qo, self.d_latent);
        let po = self.prior.forward(tape, c);
        let prior = split_gaussian(tape, po, self.d_latent);
        let z = q.sample(tape, eps);
        LatentVars { q, prior, z }
    }

    /// Per-row `−ELBO`: unit-variance Gaussian NLL of `target` plus
    /// `beta · KL(q ‖ prior)`.
    pub fn elbo_rows(&self, tape: &mut Tape, lat: &LatentVars, c: Var, target: Var, beta: f64) -> Var {
        let zc = tape.concat_cols(&[lat.z, c]);
        let recon = self.decoder.forward(tape, zc);
        let diff = tape.sub(recon, target);
        let sq = tape.square(diff);
        let rs = tape.row_sum(sq);
        let half = tape.scale(rs, 0.5);
        let nll = tape.offset(half, 0.5 * self.state_dim as f64 * math::LN_2PI);
        if beta == 0.0 {
            return nll;
        }
        let kl = kl_diag_gaussians_tape(tape, lat.q, lat.prior);
        let bkl = tape.scale(kl, beta);
        tape.add(nll, bkl)
    }

    pub fn query(&self, tape: &mut Tape, z: Var) -> Var {
        self.head.forward(tape, z)
    }

    pub fn gradient(&self, tape: &Tape, grads: &crate::diffcore::Gradients) -> Vec<f64> {
        let mut out = self.encoder.gradient(tape, grads);
        out.extend(self.prior.gradient(tape, grads));
        out.extend(self.decoder.gradient(tape, grads));
        out.extend(self.head.gradient(tape, grads));
        out
    }
}

/// The learned user model `π_φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserModel {
    pub policy: VariationalPolicy,
}

impl UserModel {
    pub fn new(cfg: &ModelConfig, d_item: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            policy: VariationalPolicy::new(cfg, d_item, rng)?,
        })
    }

    /// Click distribution over `slate` for latent `z_u`.
    pub fn policy_probs(&self, z_u: &[f64], slate: &[ItemId], embeddings: &ItemEmbeddings) -> Result<Vec<f64>> {
        self.policy.slate_probs(z_u, slate, embeddings)
    }

    /// `−ELBO` of the next state given the current one.
    pub fn elbo_loss(
        &self,
        s_t: &State,
        s_next: &State,
        c: &[f64],
        embeddings: &ItemEmbeddings,
        beta: f64,
        eps: &[f64],
    ) -> Result<f64> {
        self.policy.elbo_loss(s_t, s_next, c, embeddings, beta, eps)
    }
}

/// One evaluation of the discriminator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    pub r: f64,
    pub h_s: f64,
    pub h_s_next: f64,
    pub g: f64,
    pub d: f64,
    pub log_d: f64,
    pub log_one_minus_d: f64,
}

/// `D = exp(g) / (exp(g) + π)` with `g = r(s, x, A, c) + γ h(s′, c) − h(s, c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    reward: FunctionApproximator,
    shaping: FunctionApproximator,
    window: usize,
    d_item: usize,
    d_context: usize,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, d_item: usize, rng: &mut Rng) -> Result<Self> {
        let s = cfg.window * d_item;
        let dc = cfg.d_context;
        Ok(Self {
            reward: FunctionApproximator::new(&cfg.layers(s + dc + 2 * d_item, 1), cfg.activation, rng)?
                .with_zero_output(),
            shaping: FunctionApproximator::new(&cfg.layers(s + dc, 1), cfg.activation, rng)?,
            window: cfg.window,
            d_item,
            d_context: dc,
        })
    }

    pub fn from_parts(reward: FunctionApproximator, shaping: FunctionApproximator, window: usize, d_item: usize, d_context: usize) -> Self {
        Self {
            reward,
            shaping,
            window,
            d_item,
            d_context,
        }
    }

    pub fn reward_net(&self) -> &FunctionApproximator {
        &self.reward
    }

    pub fn shaping_net(&self) -> &FunctionApproximator {
        &self.shaping
    }

    pub fn reward_net_mut(&mut self) -> &mut FunctionApproximator {
        &mut self.reward
    }

    /// Re-initializes the reward network without zeroing its output layer.
    /// Used as the untrained baseline in reward-recovery comparisons.
    pub fn randomize_reward(&mut self, rng: &mut Rng) -> Result<()> {
        self.reward = FunctionApproximator::new(self.reward.layer_sizes(), self.reward.activation(), rng)?;
        Ok(())
    }

    pub fn shaping_net_mut(&mut self) -> &mut FunctionApproximator {
        &mut self.shaping
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.reward.parameters().to_vec();
        p.extend_from_slice(self.shaping.parameters());
        p
    }

    pub fn bind(&self, tape: &mut Tape, train: bool) -> BoundDiscriminator {
        let (reward, shaping) = if train {
            (self.reward.bind(tape), self.shaping.bind(tape))
        } else {
            (self.reward.bind_frozen(tape), self.shaping.bind_frozen(tape))
        };
        BoundDiscriminator { reward, shaping }
    }

    pub fn optimizer_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        let n = self.reward.parameters().len();
        if grad.len() != n + self.shaping.parameters().len() {
            return Err(Error::DimensionMismatch {
                what: "discriminator gradient",
                expected: n + self.shaping.parameters().len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.reward.optimizer_step(&grad[..n], lr)?;
        self.shaping.optimizer_step(&grad[n..], lr)
    }

    fn single_inputs(
        &self,
        tape: &mut Tape,
        s: &State,
        x: ItemId,
        slate: &[ItemId],
        c: &[f64],
        embeddings: &ItemEmbeddings,
    ) -> Result<(DiscInputs, Var)> {
        validate_slate(slate)?;
        if !slate.contains(&x) {
            return Err(Error::InvalidSlate(alloc::format!("click {x} not in slate")));
        }
        check_items(slate, embeddings.n_items())?;
        if c.len() != self.d_context {
            return Err(Error::DimensionMismatch {
                what: "context",
                expected: self.d_context,
                got: c.len(),
            });
        }
        let table = embeddings.table();
        let next = s.advance(x);
        let mut mean = alloc::vec![0.0; self.d_item];
        for &i in slate {
            for (m, e) in mean.iter_mut().zip(table.row(i)) {
                *m += e / slate.len() as f64;
            }
        }
        let c = tape.constant(Matrix::row_vector(c.to_vec()));
        let inputs = DiscInputs {
            state: tape.constant(Matrix::row_vector(s.featurize(table))),
            next_state: tape.constant(Matrix::row_vector(next.featurize(table))),
            click: tape.constant(Matrix::row_vector(table.row(x).to_vec())),
            slate_mean: tape.constant(Matrix::row_vector(mean)),
            c,
        };
        Ok((inputs, c))
    }

    /// The decomposed discriminator at one `(s, x, A, c)` with the current
    /// policy's probability `pi_val` of `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn discriminate(
        &self,
        s: &State,
        x: ItemId,
        slate: &[ItemId],
        c: &[f64],
        pi_val: f64,
        gamma: f64,
        embeddings: &ItemEmbeddings,
    ) -> Result<DiscriminatorOutput> {
        if !(pi_val > 0.0 && pi_val <= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!("pi_val {pi_val} outside (0, 1]")));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (inputs, _) = self.single_inputs(&mut tape, s, x, slate, c, embeddings)?;
        let log_pi = tape.constant(Matrix::scalar(math::ln(pi_val)));
        let v = b.forward(&mut tape, &inputs, log_pi, gamma);
        let log_d = tape.scalar(v.log_d);
        Ok(DiscriminatorOutput {
            r: tape.scalar(v.r),
            h_s: tape.scalar(v.h_s),
            h_s_next: tape.scalar(v.h_s_next),
            g: tape.scalar(v.g),
            d: math::exp(log_d),
            log_d,
            log_one_minus_d: tape.scalar(v.log_one_minus_d),
        })
    }

    /// The reward term alone.
    pub fn recovered_reward(
        &self,
        s: &State,
        x: ItemId,
        slate: &[ItemId],
        c: &[f64],
        embeddings: &ItemEmbeddings,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (inputs, _) = self.single_inputs(&mut tape, s, x, slate, c, embeddings)?;
        let r = b.reward(&mut tape, &inputs);
        Ok(tape.scalar(r))
    }
}

/// Discriminator inputs on a tape, one row per step.
#[derive(Clone, Copy, Debug)]
pub struct DiscInputs {
    pub state: Var,
    pub next_state: Var,
    pub click: Var,
    pub slate_mean: Var,
    pub c: Var,
}

impl DiscInputs {
    pub fn new(steps: &StepVars, c: Var) -> Self {
        Self {
            state: steps.state,
            next_state: steps.next_state,
            click: steps.click,
            slate_mean: steps.slate_mean,
            c,
        }
    }
}

/// Discriminator terms on a tape, each `rows × 1`.
#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    pub r: Var,
    pub h_s: Var,
    pub h_s_next: Var,
    pub g: Var,
    pub log_d: Var,
    pub log_one_minus_d: Var,
}

#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    reward: BoundApproximator,
    shaping: BoundApproximator,
}

impl BoundDiscriminator {
    pub fn reward(&self, tape: &mut Tape, x: &DiscInputs) -> Var {
        let rin = tape.concat_cols(&[x.state, x.c, x.click, x.slate_mean]);
        self.reward.forward(tape, rin)
    }

    pub fn forward(&self, tape: &mut Tape, x: &DiscInputs, log_pi: Var, gamma: f64) -> DiscVars {
        let r = self.reward(tape, x);
        let hin = tape.concat_cols(&[x.state, x.c]);
        let h_s = self.shaping.forward(tape, hin);
        let hin2 = tape.concat_cols(&[x.next_state, x.c]);
        let h_s_next = self.shaping.forward(tape, hin2);
        let gh = tape.scale(h_s_next, gamma);
        let rg = tape.add(r, gh);
        let g = tape.sub(rg, h_s);
        let norm = tape.log_add_exp(g, log_pi);
        let ld = tape.sub(g, norm);
        let l1 = tape.sub(log_pi, norm);
        let lo = math::ln(D_EPS);
        let hi = math::ln_1p(-D_EPS);
        DiscVars {
            r,
            h_s,
            h_s_next,
            g,
            log_d: tape.clamp(ld, lo, hi),
            log_one_minus_d: tape.clamp(l1, lo, hi),
        }
    }

    pub fn gradient(&self, tape: &Tape, grads: &crate::diffcore::Gradients) -> Vec<f64> {
        let mut g = self.reward.gradient(tape, grads);
        g.extend(self.shaping.gradient(tape, grads));
        g
    }
}

/// `−mean log D(true) − mean log(1 − D(model))`.
pub fn discriminator_loss(tape: &mut Tape, true_log_d: Var, model_log_one_minus_d: Var) -> Result<Var> {
    if tape.value(true_log_d).rows() == 0 || tape.value(model_log_one_minus_d).rows() == 0 {
        return Err(Error::EmptyBatch("discriminator_loss"));
    }
    let a = tape.mean(true_log_d);
    let b = tape.mean(model_log_one_minus_d);
    let s = tape.add(a, b);
    Ok(tape.neg(s))
}

/// Forward pieces of the user model over an episode batch.
struct UserPass {
    steps: StepVars,
    c_rows: Var,
    lat: LatentVars,
    log_pi: Var,
    context_reg: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn user_pass(
    tape: &mut Tape,
    table: Var,
    ctx: &ContextEncoder,
    ctx_net: &BoundApproximator,
    user: &BoundPolicy,
    batch: &EpisodeBatch,
    hp: &UpdateParams,
) -> UserPass {
    let cv = ctx.encode_batch(ctx_net, tape, table, batch, hp.use_context);
    let context_reg = if hp.use_context { cv.regularizer(tape, hp.beta_context) } else { None };
    let c_rows = cv.per_row(tape, &batch.steps.trajectory);
    let steps = batch.steps.bind(tape, table);
    let lat = user.latent(tape, steps.state, c_rows, batch.eps_user.clone());
    let q = user.query(tape, lat.z);
    let log_pi = tape.slate_log_prob(q, table, batch.steps.slates.clone(), batch.steps.clicks.clone());
    UserPass {
        steps,
        c_rows,
        lat,
        log_pi,
        context_reg,
    }
}

/// Mean `−ELBO` of next-state features, with a detached target.
fn user_elbo(tape: &mut Tape, user: &BoundPolicy, p: &UserPass, beta: f64) -> Var {
    let target = tape.constant(tape.value(p.steps.next_state).clone());
    let rows = user.elbo_rows(tape, &p.lat, p.c_rows, target, beta);
    tape.mean(rows)
}

fn sum_terms(tape: &mut Tape, terms: &[Option<Var>]) -> Var {
    let mut acc: Option<Var> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            Some(a) => tape.add(a, *t),
            None => *t,
        });
    }
    acc.expect("at least one loss term")
}

fn check_finite(v: f64, phase: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: phase, node: 0 })
    }
}

/// Steps the context encoder and, when learnable, the embeddings.
fn step_shared(
    tape: &Tape,
    grads: &crate::diffcore::Gradients,
    ctx: &mut ContextEncoder,
    ctx_net: &BoundApproximator,
    emb: Option<(&mut ItemEmbeddings, Var)>,
    hp: &UpdateParams,
) -> Result<()> {
    if hp.use_context {
        let g = ctx_net.gradient(tape, grads);
        ctx.net_mut().optimizer_step(&g, hp.lr)?;
    }
    if let Some((emb, table)) = emb {
        if emb.is_learnable() {
            let g = grads.get_or_zeros(table, tape.value(table).shape());
            emb.optimizer_step(&g, hp.lr)?;
        }
    }
    Ok(())
}

/// Maximum-likelihood warm-start loss `−mean log π_φ(x | ·) + −ELBO` (plus
/// the context regularizer), and optionally one update.
pub fn user_mle_step(
    user: &mut UserModel,
    ctx: &mut ContextEncoder,
    emb: &mut ItemEmbeddings,
    batch: &EpisodeBatch,
    hp: &UpdateParams,
    update: bool,
) -> Result<f64> {
    if batch.n_rows() == 0 {
        return Err(Error::EmptyBatch("user_mle_step"));
    }
    let mut tape = Tape::new();
    let table = emb.bind(&mut tape, update);
    let ctx_net = if update { ctx.net().bind(&mut tape) } else { ctx.net().bind_frozen(&mut tape) };
    let ub = user.policy.bind(&mut tape, update);
    let p = user_pass(&mut tape, table, ctx, &ctx_net, &ub, batch, hp);
    let ml = tape.mean(p.log_pi);
    let nll = tape.neg(ml);
    let elbo = user_elbo(&mut tape, &ub, &p, hp.beta);
    let loss = sum_terms(&mut tape, &[Some(nll), Some(elbo), p.context_reg]);
    let value = tape.scalar(loss);
    check_finite(value, "user_mle")?;
    if update {
        let grads = tape.backward(loss)?;
        let g = ub.gradient(&tape, &grads);
        user.policy.optimizer_step(&g, hp.lr)?;
        step_shared(&tape, &grads, ctx, &ctx_net, Some((emb, table)), hp)?;
    }
    Ok(value)
}

/// Runs `epochs` passes of [`user_mle_step`] over `batches()`, a fresh
/// list of minibatches per epoch. Returns the mean loss of each epoch.
pub fn user_mle_pretrain(
    user: &mut UserModel,
    ctx: &mut ContextEncoder,
    emb: &mut ItemEmbeddings,
    epochs: usize,
    hp: &UpdateParams,
    mut batches: impl FnMut(usize) -> Vec<EpisodeBatch>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let list = batches(epoch);
        let mut total = 0.0;
        for b in &list {
            total += user_mle_step(user, ctx, emb, b, hp, true)?;
        }
        out.push(total / list.len().max(1) as f64);
    }
    Ok(out)
}

/// Per-step `log D` and `log(1 − D)` of a batch under frozen parameters,
/// with `π` the user model's probability of each click.
pub fn discriminator_log_odds(
    disc: &Discriminator,
    user: &UserModel,
    ctx: &ContextEncoder,
    emb: &ItemEmbeddings,
    batch: &EpisodeBatch,
    hp: &UpdateParams,
) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let table = emb.bind(&mut tape, false);
    let ctx_net = ctx.net().bind_frozen(&mut tape);
    let ub = user.policy.bind(&mut tape, false);
    let db = disc.bind(&mut tape, false);
    let p = user_pass(&mut tape, table, ctx, &ctx_net, &ub, batch, hp);
    let v = db.forward(&mut tape, &DiscInputs::new(&p.steps, p.c_rows), p.log_pi, hp.shaping_gamma);
    (
        tape.value(v.log_d).as_slice().to_vec(),
        tape.value(v.log_one_minus_d).as_slice().to_vec(),
    )
}

/// One discriminator step on true offline steps against model rollouts.
/// Only the reward and shaping parameters move; contexts and `π` enter as
/// constants. Returns the loss before the step.
pub fn discriminator_update(
    disc: &mut Discriminator,
    user: &UserModel,
    ctx: &ContextEncoder,
    emb: &ItemEmbeddings,
    truth: &EpisodeBatch,
    model: &EpisodeBatch,
    hp: &UpdateParams,
) -> Result<f64> {
    if truth.n_rows() == 0 || model.n_rows() == 0 {
        return Err(Error::EmptyBatch("discriminator_update"));
    }
    let mut tape = Tape::new();
    let table = emb.bind(&mut tape, false);
    let ctx_net = ctx.net().bind_frozen(&mut tape);
    let ub = user.policy.bind(&mut tape, false);
    let db = disc.bind(&mut tape, true);
    let pt = user_pass(&mut tape, table, ctx, &ctx_net, &ub, truth, hp);
    let pm = user_pass(&mut tape, table, ctx, &ctx_net, &ub, model, hp);
    let vt = db.forward(&mut tape, &DiscInputs::new(&pt.steps, pt.c_rows), pt.log_pi, hp.shaping_gamma);
    let vm = db.forward(&mut tape, &DiscInputs::new(&pm.steps, pm.c_rows), pm.log_pi, hp.shaping_gamma);
    let loss = discriminator_loss(&mut tape, vt.log_d, vm.log_one_minus_d)?;
    let value = tape.scalar(loss);
    check_finite(value, "discriminator")?;
    let grads = tape.backward(loss)?;
    let g = db.gradient(&tape, &grads);
    disc.optimizer_step(&g, hp.lr)?;
    Ok(value)
}

/// Scalars reported by a user policy-gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UserPgStats {
    pub loss: f64,
    pub pg_loss: f64,
    pub elbo_loss: f64,
    pub mean_pseudo_reward: f64,
}

/// Pseudo-rewards `log D − log(1 − D)` per row.
pub fn pseudo_rewards(log_d: &[f64], log_one_minus_d: &[f64]) -> Vec<f64> {
    log_d.iter().zip(log_one_minus_d).map(|(a, b)| a - b).collect()
}

/// REINFORCE on model rollouts with pseudo-rewards from the frozen
/// discriminator, plus the ELBO on the true offline steps. Updates the
/// user model and the context encoder.
pub fn user_policy_pg_update(
    user: &mut UserModel,
    ctx: &mut ContextEncoder,
    disc: &Discriminator,
    emb: &ItemEmbeddings,
    rollouts: &EpisodeBatch,
    truth: &EpisodeBatch,
    hp: &UpdateParams,
) -> Result<UserPgStats> {
    if rollouts.n_rows() == 0 || truth.n_rows() == 0 {
        return Err(Error::EmptyBatch("user_policy_pg_update"));
    }
    let (ld, l1) = discriminator_log_odds(disc, user, ctx, emb, rollouts, hp);
    let rewards = pseudo_rewards(&ld, &l1);
    let returns = pg::returns_to_go(&rewards, &rollouts.steps.trajectory, hp.gamma);
    let adv = pg::center_by_step(&returns, &rollouts.steps.t);

    let mut tape = Tape::new();
    let table = emb.bind(&mut tape, false);
    let ctx_net = ctx.net().bind(&mut tape);
    let ub = user.policy.bind(&mut tape, true);
    let pr = user_pass(&mut tape, table, ctx, &ctx_net, &ub, rollouts, hp);
    let pg_loss = pg::reinforce_loss(&mut tape, pr.log_pi, adv);
    let pt = user_pass(&mut tape, table, ctx, &ctx_net, &ub, truth, hp);
    let elbo = user_elbo(&mut tape, &ub, &pt, hp.beta);
    let loss = sum_terms(&mut tape, &[Some(pg_loss), Some(elbo), pr.context_reg, pt.context_reg]);
    let value = tape.scalar(loss);
    check_finite(value, "user_pg")?;
    let grads = tape.backward(loss)?;
    let g = ub.gradient(&tape, &grads);
    user.policy.optimizer_step(&g, hp.lr)?;
    step_shared(&tape, &grads, ctx, &ctx_net, None, hp)?;
    Ok(UserPgStats {
        loss: value,
        pg_loss: tape.scalar(pg_loss),
        elbo_loss: tape.scalar(elbo),
        mean_pseudo_reward: math::mean(&rewards),
    })
}

/// Recovered reward `r_ω` for every row of a batch, contexts from the
/// frozen encoder.
pub fn recovered_rewards(
    disc: &Discriminator,
    ctx: &ContextEncoder,
    emb: &ItemEmbeddings,
    batch: &EpisodeBatch,
    hp: &UpdateParams,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let table = emb.bind(&mut tape, false);
    let ctx_net = ctx.net().bind_frozen(&mut tape);
    let db = disc.bind(&mut tape, false);
    let cv = ctx.encode_batch(&ctx_net, &mut tape, table, batch, hp.use_context);
    let c_rows = cv.per_row(&mut tape, &batch.steps.trajectory);
    let steps = batch.steps.bind(&mut tape, table);
    let r = db.reward(&mut tape, &DiscInputs::new(&steps, c_rows));
    tape.value(r).as_slice().to_vec()
}

/// Click log-probabilities `log π(x | z, A)` for query rows against slates.
pub fn slate_click_log_probs(query: &Matrix, slates: &RaggedIds, clicks: &[ItemId], embeddings: &ItemEmbeddings) -> Vec<f64> {
    slates
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let scores: Vec<f64> = s.iter().map(|&i| math::dot(query.row(r), embeddings.table().row(i))).collect();
            let lse = math::log_sum_exp(&scores);
            let pos = s.iter().position(|&i| i == clicks[r]).expect("click in slate");
            scores[pos] - lse
        })
        .collect()
}
