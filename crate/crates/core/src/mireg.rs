//! Jensen–Shannon mutual-information lower bound between the user and
//! recommender latents, and the regularizer step that ascends it.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, UpdateParams};
use crate::context::ContextEncoder;
use crate::data::{EpisodeBatch, ItemEmbeddings};
use crate::diffcore::{BoundApproximator, FunctionApproximator, Matrix, Tape, Var};
use crate::math;
use crate::recagent::RecAgent;
use crate::rng::Rng;
use crate::usermodel::UserModel;
use crate::{Error, Result};

/// `T_ψ(z_u, z_rec)`, a scalar critic over concatenated latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticsNetwork {
    net: FunctionApproximator,
}

impl StatisticsNetwork {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::with_dims(cfg, cfg.d_latent, cfg.d_latent, rng)
    }

    pub fn with_dims(cfg: &ModelConfig, d_u: usize, d_rec: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            net: FunctionApproximator::new(&cfg.layers(d_u + d_rec, 1), cfg.activation, rng)?,
        })
    }

    pub fn from_net(net: FunctionApproximator) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &FunctionApproximator {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FunctionApproximator {
        &mut self.net
    }

    /// Critic values on joint rows and on rows with `z_rec` permuted.
    fn critic(&self, b: &BoundApproximator, tape: &mut Tape, z_u: Var, z_rec: Var, perm: &[usize]) -> (Var, Var) {
        let joint = tape.concat_cols(&[z_u, z_rec]);
        let t_joint = b.forward(tape, joint);
        let shuffled = tape.gather_rows(z_rec, perm.to_vec());
        let marg = tape.concat_cols(&[z_u, shuffled]);
        let t_marg = b.forward(tape, marg);
        (t_joint, t_marg)
    }

    /// The bound on plain matrices with marginal pairing `perm`.
    pub fn bound(&self, z_u: &Matrix, z_rec: &Matrix, perm: &[usize]) -> Result<f64> {
        check_batch(z_u, z_rec, perm)?;
        let mut tape = Tape::new();
        let b = self.net.bind_frozen(&mut tape);
        let u = tape.constant(z_u.clone());
        let r = tape.constant(z_rec.clone());
        let (tj, tm) = self.critic(&b, &mut tape, u, r, perm);
        Ok(jsd_mi_lower_bound(tape.value(tj).as_slice(), tape.value(tm).as_slice()))
    }

    /// One ascent step on the bound in `ψ` only. Returns the bound before
    /// the step.
    pub fn ascend(&mut self, z_u: &Matrix, z_rec: &Matrix, perm: &[usize], lr: f64) -> Result<f64> {
        check_batch(z_u, z_rec, perm)?;
        let mut tape = Tape::new();
        let b = self.net.bind(&mut tape);
        let u = tape.constant(z_u.clone());
        let r = tape.constant(z_rec.clone());
        let (tj, tm) = self.critic(&b, &mut tape, u, r, perm);
        let bound = jsd_bound_tape(&mut tape, tj, tm);
        let loss = tape.neg(bound);
        let grads = tape.backward(loss)?;
        self.net.optimizer_step(&b.gradient(&tape, &grads), lr)?;
        Ok(tape.scalar(bound))
    }
}

fn check_batch(z_u: &Matrix, z_rec: &Matrix, perm: &[usize]) -> Result<()> {
    if z_u.rows() < 2 {
        return Err(Error::InvalidArgument("mutual information bound needs a batch of at least 2".into()));
    }
    if z_rec.rows() != z_u.rows() || perm.len() != z_u.rows() {
        return Err(Error::DimensionMismatch {
            what: "paired latent rows",
            expected: z_u.rows(),
            got: z_rec.rows().min(perm.len()),
        });
    }
    Ok(())
}

/// `mean_joint[−sp(−T)] − mean_marginal[sp(T)]`.
pub fn jsd_mi_lower_bound(t_joint: &[f64], t_marginal: &[f64]) -> f64 {
    let j = t_joint.iter().map(|&t| -math::softplus(-t)).sum::<f64>() / t_joint.len() as f64;
    let m = t_marginal.iter().map(|&t| math::softplus(t)).sum::<f64>() / t_marginal.len() as f64;
    j - m
}

/// [`jsd_mi_lower_bound`] on a tape.
pub fn jsd_bound_tape(tape: &mut Tape, t_joint: Var, t_marginal: Var) -> Var {
    let nj = tape.neg(t_joint);
    let spj = tape.softplus(nj);
    let a = tape.mean(spj);
    let spm = tape.softplus(t_marginal);
    let b = tape.mean(spm);
    let s = tape.add(a, b);
    tape.neg(s)
}

/// A uniformly shuffled permutation of `0..n` with no fixed point, by
/// rejection.
pub fn derangement(n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument("derangement needs at least 2 elements".into()));
    }
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(p);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MiStats {
    pub bound: f64,
}

/// One shared step: `ψ` ascends the bound; the two latent encoders and the
/// context encoder ascend `λ_MI ·` bound through the reparameterized
/// samples. With `λ_MI = 0` only `ψ` moves; with `detach_rec_in_mi` the
/// recommender's latent is a constant.
#[allow(clippy::too_many_arguments)]
pub fn mi_update(
    stats: &mut StatisticsNetwork,
    user: &mut UserModel,
    agent: &mut RecAgent,
    ctx: &mut ContextEncoder,
    emb: &ItemEmbeddings,
    batch: &EpisodeBatch,
    hp: &UpdateParams,
    rng: &mut Rng,
) -> Result<MiStats> {
    let perm = derangement(batch.n_rows(), rng)?;
    let mut tape = Tape::new();
    let table = emb.bind(&mut tape, false);
    let ctx_net = ctx.net().bind(&mut tape);
    let ub = user.policy.bind(&mut tape, true);
    let ab = agent.policy.bind(&mut tape, true);
    let sb = stats.net.bind(&mut tape);
    let cv = ctx.encode_batch(&ctx_net, &mut tape, table, batch, hp.use_context);
    let c_rows = cv.per_row(&mut tape, &batch.steps.trajectory);
    let steps = batch.steps.bind(&mut tape, table);
    let zu = ub.latent(&mut tape, steps.state, c_rows, batch.eps_user.clone()).z;
    let mut zr = ab.latent(&mut tape, steps.state, c_rows, batch.eps_rec.clone()).z;
    if hp.detach_rec_in_mi {
        zr = tape.constant(tape.value(zr).clone());
    }
    let (tj, tm) = stats.critic(&sb, &mut tape, zu, zr, &perm);
    let bound = jsd_bound_tape(&mut tape, tj, tm);
    let value = tape.scalar(bound);
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "mi_bound", node: bound.index() });
    }
    let loss = tape.neg(bound);
    let grads = tape.backward(loss)?;
    stats.net.optimizer_step(&sb.gradient(&tape, &grads), hp.lr)?;
    if hp.lambda_mi > 0.0 {
        let scale = |g: Vec<f64>| -> Vec<f64> { g.into_iter().map(|x| x * hp.lambda_mi).collect() };
        let n_enc = user.policy.networks()[0].parameters().len();
        let gu = scale(ub.gradient(&tape, &grads));
        user.policy.networks_mut()[0].optimizer_step(&gu[..n_enc], hp.lr)?;
        if !hp.detach_rec_in_mi {
            let ga = scale(ab.gradient(&tape, &grads));
            let n_enc = agent.policy.networks()[0].parameters().len();
            agent.policy.networks_mut()[0].optimizer_step(&ga[..n_enc], hp.lr)?;
        }
        if hp.use_context {
            ctx.net_mut().optimizer_step(&scale(ctx_net.gradient(&tape, &grads)), hp.lr)?;
        }
    }
    Ok(MiStats { bound: value })
}

/// Jensen–Shannon divergence (natural log) between a standard bivariate
/// normal with correlation `rho` and the product of its marginals, by
/// midpoint quadrature on `[−half_width, half_width]²`.
pub fn bivariate_gaussian_jsd(rho: f64, half_width: f64, n: usize) -> f64 {
    let h = 2.0 * half_width / n as f64;
    let det = 1.0 - rho * rho;
    let norm_joint = 1.0 / (2.0 * core::f64::consts::PI * math::sqrt(det));
    let norm_prod = 1.0 / (2.0 * core::f64::consts::PI);
    let mut total = 0.0;
    for i in 0..n {
        let x = -half_width + (i as f64 + 0.5) * h;
        for j in 0..n {
            let y = -half_width + (j as f64 + 0.5) * h;
            let p = norm_joint * math::exp(-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * det));
            let q = norm_prod * math::exp(-(x * x + y * y) / 2.0);
            let m = 0.5 * (p + q);
            let mut v = 0.0;
            if p > 0.0 {
                v += 0.5 * p * math::ln(p / m);
            }
            if q > 0.0 {
                v += 0.5 * q * math::ln(q / m);
            }
            total += v;
        }
    }
    total * h * h
}

/// Supremum of the bound for a correlated standard bivariate normal,
/// `2·JSD − 2 ln 2`.
pub fn bivariate_gaussian_bound_supremum(rho: f64) -> f64 {
    2.0 * bivariate_gaussian_jsd(rho, 8.0, 800) - 2.0 * math::LN_2
}

/// Fits `stats` to pairs `(x, ρx + √(1−ρ²)ε)` and returns the bound on a
/// large fresh evaluation sample.
pub fn fit_correlated_gaussians(
    stats: &mut StatisticsNetwork,
    rho: f64,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = |rng: &mut Rng, n: usize| {
        let x = crate::diffcore::standard_normal(rng, n);
        let e = crate::diffcore::standard_normal(rng, n);
        let s = math::sqrt(1.0 - rho * rho);
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| rho * a + s * b).collect();
        (Matrix::column(x), Matrix::column(y))
    };
    for _ in 0..steps {
        let (x, y) = draw(rng, batch);
        let perm = derangement(batch, rng)?;
        stats.ascend(&x, &y, &perm, lr)?;
    }
    let n = 20_000;
    let (x, y) = draw(rng, n);
    let perm = derangement(n, rng)?;
    stats.bound(&x, &y, &perm)
}
