//! Ancestral sampling of F0 and UV.

use super::denoiser::PitchDenoiser;
use super::gaussian::{oracle_eps, reverse_step};
use super::multinomial::{multinomial_posterior, uniform_sample};
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, RngState, Tensor};

/// Anything that estimates `(eps, x0 logits)` from a noisy pitch state.
pub trait PitchEstimator {
    fn categories(&self) -> usize;
    fn estimate(&self, x_t: &[f32], y_t: &[f32], t: usize) -> Result<(Vec<f32>, Vec<f32>)>;
}

/// A trained denoiser bound to one condition sequence.
pub struct Conditioned<'a> {
    pub denoiser: &'a PitchDenoiser,
    pub store: &'a ParamStore,
    pub cond: &'a Tensor,
}

impl PitchEstimator for Conditioned<'_> {
    fn categories(&self) -> usize {
        self.denoiser.categories
    }

    fn estimate(&self, x_t: &[f32], y_t: &[f32], t: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        self.denoiser.predict(self.store, x_t, y_t, t, self.cond)
    }
}

/// Knows the clean track: returns the exact noise and near-one-hot logits.
pub struct Oracle<'a> {
    pub sched: &'a DiffusionSchedule,
    pub x0: &'a [f32],
    pub y0: &'a [f32],
    pub k: usize,
}

impl PitchEstimator for Oracle<'_> {
    fn categories(&self) -> usize {
        self.k
    }

    fn estimate(&self, x_t: &[f32], _y_t: &[f32], t: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let logits = self.y0.iter().map(|&v| if v == 1.0 { 20.0 } else { -20.0 }).collect();
        Ok((oracle_eps(self.sched, x_t, self.x0, t), logits))
    }
}

/// Sampled pitch in standardized units with one-hot UV rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchSample {
    pub f0: Vec<f32>,
    pub uv: Vec<f32>,
}

fn softmax_rows(logits: &[f32], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Run the reverse chain from `x_T ~ N(0, I)`, `y_T ~ uniform` down to
/// `t = 1`. The final UV is the argmax of the last estimate unless
/// `sample_final_uv` is set.
pub fn sample_pitch(
    est: &dyn PitchEstimator,
    frames: usize,
    sched: &DiffusionSchedule,
    rng: &mut RngState,
    sample_final_uv: bool,
) -> Result<PitchSample> {
    let k = est.categories();
    let mut x = rng.normal_vec(frames);
    let mut y = uniform_sample(frames, k, rng);
    for t in (1..=sched.steps()).rev() {
        let (eps, logits) = est.estimate(&x, &y, t)?;
        if eps.len() != frames || logits.len() != frames * k {
            return Err(Error::arg("estimator returned the wrong number of frames"));
        }
        if eps.iter().chain(&logits).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: t,
                op: "denoiser",
            });
        }
        reverse_step(sched, &mut x, &eps, t, rng)?;
        let y0_hat = softmax_rows(&logits, k);
        let probs = if t > 1 || sample_final_uv {
            let yt: Vec<f64> = y.iter().map(|&v| v as f64).collect();
            Some(multinomial_posterior(sched, &yt, &y0_hat, k, t)?)
        } else {
            None
        };
        y.fill(0.0);
        for (i, row) in y.chunks_exact_mut(k).enumerate() {
            let c = match &probs {
                Some(p) => rng.categorical(&p[i * k..(i + 1) * k]),
                None => argmax(&y0_hat[i * k..(i + 1) * k]),
            };
            row[c] = 1.0;
        }
    }
    Ok(PitchSample { f0: x, uv: y })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_reconstructs_the_track() {
        let sched = DiffusionSchedule::new(100, 1e-4, 0.06).unwrap();
        let mut rng = RngState::new(1);
        let x0: Vec<f32> = (0..64).map(|i| (i as f32 / 9.0).sin()).collect();
        let mut y0 = vec![0.0; 128];
        for i in 0..64 {
            y0[2 * i + usize::from(i % 7 == 0)] = 1.0;
        }
        let oracle = Oracle {
            sched: &sched,
            x0: &x0,
            y0: &y0,
            k: 2,
        };
        let s = sample_pitch(&oracle, 64, &sched, &mut rng, false).unwrap();
        let rmse = (x0.iter().zip(&s.f0).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!(rmse < 0.05, "{rmse}");
        assert_eq!(s.uv, y0);
    }

    #[test]
    fn sampling_is_seeded() {
        let sched = DiffusionSchedule::new(10, 1e-3, 0.2).unwrap();
        let x0 = vec![0.5f32; 8];
        let y0 = [1.0f32, 0.0].repeat(8);
        let oracle = Oracle {
            sched: &sched,
            x0: &x0,
            y0: &y0,
            k: 2,
        };
        let a = sample_pitch(&oracle, 8, &sched, &mut RngState::new(5), true).unwrap();
        let b = sample_pitch(&oracle, 8, &sched, &mut RngState::new(5), true).unwrap();
        assert_eq!(a, b);
        for row in a.uv.chunks_exact(2) {
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
    }
}
