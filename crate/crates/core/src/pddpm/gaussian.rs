//! Gaussian diffusion of continuous tracks.

use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, RngState};

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`; returns `(x_t, eps)`.
pub fn gaussian_forward(
    sched: &DiffusionSchedule,
    x0: &[f32],
    t: usize,
    rng: &mut RngState,
) -> Result<(Vec<f32>, Vec<f32>)> {
    sched.check_step(t)?;
    let eps = rng.normal_vec(x0.len());
    Ok((noised(sched, x0, &eps, t), eps))
}

pub fn noised(sched: &DiffusionSchedule, x0: &[f32], eps: &[f32], t: usize) -> Vec<f32> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect()
}

/// One forward transition `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z`.
pub fn gaussian_step(sched: &DiffusionSchedule, x_prev: &[f64], t: usize, rng: &mut RngState) -> Vec<f64> {
    let b = sched.beta(t);
    x_prev
        .iter()
        .map(|&x| (1.0 - b).sqrt() * x + b.sqrt() * rng.normal())
        .collect()
}

/// Noise that maps `x0` to `x_t` exactly.
pub fn oracle_eps(sched: &DiffusionSchedule, x_t: &[f32], x0: &[f32], t: usize) -> Vec<f32> {
    let ab = sched.alpha_bar(t);
    x_t.iter()
        .zip(x0)
        .map(|(&xt, &x)| ((xt as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32)
        .collect()
}

/// Ancestral update: `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)`
/// plus `sqrt(beta_tilde_t) z` for `t > 1`.
pub fn reverse_step(
    sched: &DiffusionSchedule,
    x_t: &mut [f32],
    eps_hat: &[f32],
    t: usize,
    rng: &mut RngState,
) -> Result<()> {
    if eps_hat.len() != x_t.len() {
        return Err(Error::arg("noise estimate length differs from the sample"));
    }
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let sd = if t > 1 {
        sched.posterior_variance(t).sqrt()
    } else {
        0.0
    };
    for (x, &e) in x_t.iter_mut().zip(eps_hat) {
        let mean = (*x as f64 - coef * e as f64) * inv;
        let z = if t > 1 { rng.normal() } else { 0.0 };
        *x = (mean + sd * z) as f32;
    }
    Ok(())
}

/// Unweighted mean squared error between noise and its estimate.
pub fn gdiff_loss(g: &mut Graph, eps: NodeId, eps_hat: NodeId) -> Result<NodeId> {
    if g.shape(eps) != g.shape(eps_hat) {
        return Err(Error::arg(format!(
            "noise {:?} and estimate {:?} differ in shape",
            g.shape(eps),
            g.shape(eps_hat)
        )));
    }
    let d = g.sub(eps_hat, eps)?;
    let d2 = g.square(d)?;
    g.mean(d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::new(100, 1e-4, 0.06).unwrap()
    }

    #[test]
    fn zero_signal_has_zero_mean() {
        let s = sched();
        let n = 100_000;
        let t = 40;
        let (x, _) = gaussian_forward(&s, &vec![0.0; n], t, &mut RngState::new(1)).unwrap();
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let se = ((1.0 - s.alpha_bar(t)) / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "{mean} vs {se}");
    }

    #[test]
    fn first_step_barely_moves() {
        let s = sched();
        let x0: Vec<f32> = (0..50).map(|i| i as f32 / 10.0).collect();
        let (x, eps) = gaussian_forward(&s, &x0, 1, &mut RngState::new(2)).unwrap();
        let bound = (1.0 - s.alpha_bar(1)).sqrt();
        for i in 0..50 {
            let limit = bound * eps[i].abs() as f64 + (1.0 - s.alpha_bar(1).sqrt()) * x0[i].abs() as f64 + 1e-6;
            assert!(((x[i] - x0[i]) as f64).abs() <= limit);
        }
        assert!(gaussian_forward(&s, &x0, 0, &mut RngState::new(2)).is_err());
        assert!(gaussian_forward(&s, &x0, 101, &mut RngState::new(2)).is_err());
    }

    #[test]
    fn oracle_noise_inverts_the_forward_map() {
        let s = sched();
        let x0 = vec![0.3, -1.2, 2.0];
        let (xt, eps) = gaussian_forward(&s, &x0, 70, &mut RngState::new(3)).unwrap();
        let e = oracle_eps(&s, &xt, &x0, 70);
        for (a, b) in e.iter().zip(&eps) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let e = g.input("e", Tensor::zeros(&[4, 1]));
        let ones = g.input("o", Tensor::full(&[4, 1], 1.0));
        let l = gdiff_loss(&mut g, e, ones).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l = gdiff_loss(&mut g, ones, ones).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let short = g.input("s", Tensor::zeros(&[3, 1]));
        assert!(gdiff_loss(&mut g, e, short).is_err());
    }
}
