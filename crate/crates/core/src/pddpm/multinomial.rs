//! Multinomial diffusion of categorical tracks. Rows are flat slices of
//! `k` probabilities.

use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, RngState, Tensor};

fn check_one_hot(y: &[f32], k: usize) -> Result<()> {
    if k < 2 || !y.len().is_multiple_of(k) {
        return Err(Error::arg(format!("{} values do not form rows of {k}", y.len())));
    }
    for (i, row) in y.chunks_exact(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::arg(format!("row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// `(1 - beta) y + beta / k`.
pub fn step_probs(y_prev: &[f64], beta: f64) -> Vec<f64> {
    let k = y_prev.len() as f64;
    y_prev.iter().map(|&p| (1.0 - beta) * p + beta / k).collect()
}

/// `abar y0 + (1 - abar) / k`.
pub fn marginal_probs(y0: &[f64], alpha_bar: f64) -> Vec<f64> {
    step_probs(y0, 1.0 - alpha_bar)
}

/// Sample `y_t ~ C(abar_t y0 + (1 - abar_t) / k)` per row.
pub fn multinomial_forward(
    sched: &DiffusionSchedule,
    y0: &[f32],
    k: usize,
    t: usize,
    rng: &mut RngState,
) -> Result<Vec<f32>> {
    sched.check_step(t)?;
    check_one_hot(y0, k)?;
    let ab = sched.alpha_bar(t);
    let mut out = vec![0.0f32; y0.len()];
    for (row, dst) in y0.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let p = marginal_probs(&row.iter().map(|&v| v as f64).collect::<Vec<_>>(), ab);
        dst[rng.categorical(&p)] = 1.0;
    }
    Ok(out)
}

/// Uniform categorical rows.
pub fn uniform_sample(n: usize, k: usize, rng: &mut RngState) -> Vec<f32> {
    let mut out = vec![0.0f32; n * k];
    for row in out.chunks_exact_mut(k) {
        row[rng.below(k)] = 1.0;
    }
    out
}

/// `theta ∝ [alpha_t y_t + (1 - alpha_t)/k] * [abar_{t-1} y0 + (1 - abar_{t-1})/k]`,
/// row by row.
pub fn posterior(
    y_t: &[f64],
    y0_hat: &[f64],
    k: usize,
    alpha_t: f64,
    alpha_bar_prev: f64,
) -> Result<Vec<f64>> {
    if y_t.len() != y0_hat.len() || !y_t.len().is_multiple_of(k) {
        return Err(Error::arg("posterior inputs differ in shape"));
    }
    let mut out = Vec::with_capacity(y_t.len());
    for (i, (yt, y0)) in y_t.chunks_exact(k).zip(y0_hat.chunks_exact(k)).enumerate() {
        let s: f64 = y0.iter().sum();
        if (s - 1.0).abs() > 1e-4 || y0.iter().any(|&v| v < 0.0) {
            return Err(Error::arg(format!("row {i} of the x0 estimate is not a distribution")));
        }
        let a = step_probs(yt, 1.0 - alpha_t);
        let b = marginal_probs(y0, alpha_bar_prev);
        let un: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let z: f64 = un.iter().sum();
        out.extend(un.iter().map(|v| v / z));
    }
    Ok(out)
}

pub fn multinomial_posterior(
    sched: &DiffusionSchedule,
    y_t: &[f64],
    y0_hat: &[f64],
    k: usize,
    t: usize,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    posterior(y_t, y0_hat, k, sched.alpha(t), sched.alpha_bar(t - 1))
}

/// For `t > 1`, the mean over frames of
/// `KL(theta_post(y_t, y0) || theta_post(y_t, softmax(logits)))`; at `t = 1`
/// the negative log-likelihood of `y0` under `softmax(logits)`.
pub fn mdiff_loss(
    g: &mut Graph,
    sched: &DiffusionSchedule,
    y0: &[f32],
    y_t: &[f32],
    logits: NodeId,
    t: usize,
) -> Result<NodeId> {
    sched.check_step(t)?;
    let (n, k) = (g.shape(logits)[0], g.shape(logits)[1]);
    check_one_hot(y0, k)?;
    check_one_hot(y_t, k)?;
    if y0.len() != n * k || y_t.len() != n * k {
        return Err(Error::arg("category rows do not match the logits"));
    }
    if t == 1 {
        let lp = g.log_softmax(logits)?;
        let target = g.constant(Tensor::new(vec![n, k], y0.to_vec())?);
        let picked = g.mul(lp, target)?;
        let s = g.sum(picked)?;
        return g.scale(s, -1.0 / n as f64);
    }
    let (alpha, ab_prev) = (sched.alpha(t), sched.alpha_bar(t - 1));
    let y0d: Vec<f64> = y0.iter().map(|&v| v as f64).collect();
    let ytd: Vec<f64> = y_t.iter().map(|&v| v as f64).collect();
    let truth = posterior(&ytd, &y0d, k, alpha, ab_prev)?;
    let neg_entropy: f64 = truth.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();

    let p = g.softmax(logits)?;
    let b = g.scale(p, ab_prev)?;
    let b = g.shift(b, (1.0 - ab_prev) / k as f64)?;
    let a: Vec<f32> = ytd
        .chunks_exact(k)
        .flat_map(|r| step_probs(r, 1.0 - alpha))
        .map(|v| v as f32)
        .collect();
    let a = g.constant(Tensor::new(vec![n, k], a)?);
    let un = g.mul(a, b)?;
    let theta = g.normalize_rows(un)?;
    let log_theta = g.log(theta)?;
    let w = g.constant(Tensor::new(vec![n, k], truth.iter().map(|&v| v as f32).collect())?);
    let cross = g.mul(w, log_theta)?;
    let s = g.sum(cross)?;
    let s = g.scale(s, -1.0 / n as f64)?;
    g.shift(s, neg_entropy / n as f64)
}

/// Direct `sum p log(p / q)` for the oracle tests.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}
