use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Matrix, Tape, Var};
use crate::math;
use crate::rng::Rng;
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Diagonal Gaussian `N(mean, diag(exp(log_std))²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl GaussianPosterior {
    /// Clamps `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`; infinities map to
    /// the bounds.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::DimensionMismatch {
                what: "gaussian log_std",
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) || log_std.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("non-finite gaussian parameter".into()));
        }
        let log_std = log_std
            .into_iter()
            .map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self { mean, log_std })
    }

    /// `N(0, I)`.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    /// Per-coordinate precision `exp(-2·log_std)`.
    pub fn precision(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| math::exp(-2.0 * s)).collect()
    }
}

/// `mean + exp(log_std) ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_reparameterized(q: &GaussianPosterior, rng: &mut Rng) -> Vec<f64> {
    q.mean
        .iter()
        .zip(&q.log_std)
        .map(|(m, s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + math::exp(*s) * e
        })
        .collect()
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn standard_normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, standard_normal(rng, rows * cols))
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gaussians(q: &GaussianPosterior, p: &GaussianPosterior) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            what: "kl_diag_gaussians",
            expected: q.dim(),
            got: p.dim(),
        });
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        // 0.5·(r - 1 - ln r) with r = σq²/σp², plus the mean term.
        let x = 2.0 * (q.log_std[i] - p.log_std[i]);
        let d = q.mean[i] - p.mean[i];
        kl += 0.5 * (libm::expm1(x) - x) + 0.5 * d * d * math::exp(-2.0 * p.log_std[i]);
    }
    Ok(kl.max(0.0))
}

/// A batch of diagonal Gaussians on a tape, one per row.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

/// Splits a `b × 2d` network output into mean and clamped log-std halves.
pub fn split_gaussian(tape: &mut Tape, out: Var, dim: usize) -> GaussianVars {
    let mean = tape.slice_cols(out, 0, dim);
    let raw = tape.slice_cols(out, dim, dim);
    let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
    GaussianVars { mean, log_std }
}

impl GaussianVars {
    /// `b × d` standard normal prior, as constants.
    pub fn standard(tape: &mut Tape, rows: usize, dim: usize) -> Self {
        let mean = tape.constant(Matrix::zeros(rows, dim));
        let log_std = tape.constant(Matrix::zeros(rows, dim));
        Self { mean, log_std }
    }

    /// Reparameterized sample with externally supplied noise `eps`.
    pub fn sample(&self, tape: &mut Tape, eps: Matrix) -> Var {
        let e = tape.constant(eps);
        let std = tape.exp(self.log_std);
        let noise = tape.mul(std, e);
        tape.add(self.mean, noise)
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        tape.value(self.mean).rows()
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.value(self.mean).cols()
    }

    pub fn posterior(&self, tape: &Tape, row: usize) -> GaussianPosterior {
        GaussianPosterior {
            mean: tape.value(self.mean).row(row).to_vec(),
            log_std: tape.value(self.log_std).row(row).to_vec(),
        }
    }
}

/// Row-wise `KL(q ‖ p)` on the tape, `b × 1`.
pub fn kl_diag_gaussians_tape(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Var {
    // ls_p - ls_q + 0.5·(exp(2(ls_q - ls_p)) + (μq - μp)²·exp(-2 ls_p)) - 0.5
    let dls = tape.sub(q.log_std, p.log_std);
    let two_dls = tape.scale(dls, 2.0);
    let ratio = tape.exp(two_dls);
    let dm = tape.sub(q.mean, p.mean);
    let dm2 = tape.square(dm);
    let neg2p = tape.scale(p.log_std, -2.0);
    let inv_var_p = tape.exp(neg2p);
    let mterm = tape.mul(dm2, inv_var_p);
    let inner = tape.add(ratio, mterm);
    let half = tape.scale(inner, 0.5);
    let minus_dls = tape.sub(half, dls);
    let per_dim = tape.offset(minus_dls, -0.5);
    tape.row_sum(per_dim)
}
