//! Score-function (REINFORCE) helpers shared by both learners.

use alloc::vec::Vec;

use crate::diffcore::{Matrix, Tape, Var};

/// Discounted return-to-go for rows laid out trajectory-major, time-minor,
/// with `trajectory[r]` naming each row's trajectory.
pub fn returns_to_go(rewards: &[f64], trajectory: &[usize], gamma: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), trajectory.len());
    let mut out = alloc::vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for r in (0..rewards.len()).rev() {
        let last = r + 1 == rewards.len() || trajectory[r + 1] != trajectory[r];
        if last {
            acc = 0.0;
        }
        acc = rewards[r] + gamma * acc;
        out[r] = acc;
    }
    out
}

/// Subtracts the batch mean taken over rows sharing the same time step.
/// The mean is accumulated relative to the first value of each group so
/// that identical values center to exactly zero.
pub fn center_by_step(values: &[f64], t: &[usize]) -> Vec<f64> {
    assert_eq!(values.len(), t.len());
    let horizon = t.iter().max().map_or(0, |m| m + 1);
    let mut first = alloc::vec![None; horizon];
    let mut sum = alloc::vec![0.0; horizon];
    let mut count = alloc::vec![0usize; horizon];
    for (&v, &ti) in values.iter().zip(t) {
        let f = *first[ti].get_or_insert(v);
        sum[ti] += v - f;
        count[ti] += 1;
    }
    values
        .iter()
        .zip(t)
        .map(|(&v, &ti)| {
            let base = first[ti].unwrap() + sum[ti] / count[ti] as f64;
            v - base
        })
        .collect()
}

/// Surrogate whose gradient is the negated REINFORCE estimate
/// `−mean_r advantage_r · ∇ log π_r`.
pub fn reinforce_loss(tape: &mut Tape, log_probs: Var, advantages: Vec<f64>) -> Var {
    let adv = tape.constant(Matrix::column(advantages));
    let weighted = tape.mul(adv, log_probs);
    let m = tape.mean(weighted);
    tape.neg(m)
}
