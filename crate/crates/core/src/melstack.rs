//! Coarse spectral decoder and the diffusion post-net that refines it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{linear, sinusoidal, FftStack};
use crate::numerics::{Graph, NodeId, ParamStore, RngState, Tensor};
use crate::pddpm::gaussian::{noised, reverse_step};
use crate::pddpm::{DiffusionSchedule, WaveNet, WaveNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelStackConfig {
    pub decoder_fft_blocks: usize,
    pub postnet: WaveNetConfig,
    pub spectral_dim: usize,
}

/// `1x1(f0) + onehot(uv) E`, `[T, hidden]`.
#[derive(Clone, Debug)]
pub struct PitchEmbedding {
    pub hidden: usize,
    pub categories: usize,
}

impl PitchEmbedding {
    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        store.init_linear("pemb.f0", 1, self.hidden, rng);
        store.init_normal("pemb.uv", &[self.categories, self.hidden], 1.0, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f0: NodeId, uv: NodeId) -> Result<NodeId> {
        let a = linear(g, store, "pemb.f0", f0)?;
        let table = g.param(store, "pemb.uv")?;
        let b = g.matmul(uv, table)?;
        g.add(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct MelDecoder {
    pub hidden: usize,
    pub spectral_dim: usize,
    stack: FftStack,
}

impl MelDecoder {
    pub fn new(
        hidden: usize,
        blocks: usize,
        heads: usize,
        filter: usize,
        kernel: usize,
        spectral_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden,
            spectral_dim,
            stack: FftStack::new("mel.fft", blocks, hidden, heads, filter, kernel)?,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.stack.init(store, rng);
        store.init_linear("mel.out", self.hidden, self.spectral_dim, rng);
    }

    /// Sum the lyric feature, pitch embedding and singer row, add frame
    /// positions, run the FFT blocks and project to `[T, spectral_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lyric: NodeId,
        pitch: NodeId,
        singer: NodeId,
    ) -> Result<NodeId> {
        if g.shape(lyric) != g.shape(pitch) {
            return Err(Error::arg(format!(
                "lyric {:?} and pitch {:?} features differ",
                g.shape(lyric),
                g.shape(pitch)
            )));
        }
        let t = g.shape(lyric)[0];
        let x = g.add(lyric, pitch)?;
        let x = g.add_row(x, singer)?;
        let positions: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let pe = g.constant(sinusoidal(&positions, self.hidden));
        let x = g.add(x, pe)?;
        let x = self.stack.forward(g, store, x)?;
        linear(g, store, "mel.out", x)
    }
}

/// Mean absolute error.
pub fn mel_loss(g: &mut Graph, mel_p: NodeId, mel_g: NodeId) -> Result<NodeId> {
    if g.shape(mel_p) != g.shape(mel_g) {
        return Err(Error::arg(format!(
            "predicted {:?} and target {:?} spectra differ",
            g.shape(mel_p),
            g.shape(mel_g)
        )));
    }
    let d = g.sub(mel_p, mel_g)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Denoiser over spectral frames conditioned on the coarse decoder output.
#[derive(Clone, Debug)]
pub struct PostNet {
    pub net: WaveNet,
    pub dim: usize,
}

impl PostNet {
    pub fn new(cfg: WaveNetConfig, dim: usize) -> Result<Self> {
        Ok(Self {
            net: WaveNet::new("post.wn", cfg, dim)?,
            dim,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let r = self.net.cfg.residual_channels;
        store.init_linear("post.x", self.dim, r, rng);
        store.init_linear("post.cond", self.dim, r, rng);
        self.net.init(store, rng);
        store.init_linear("post.eps", r, self.dim, rng);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: NodeId,
        t: usize,
        coarse: NodeId,
    ) -> Result<NodeId> {
        if g.shape(x_t) != g.shape(coarse) || g.shape(coarse)[1] != self.dim {
            return Err(Error::arg(format!(
                "post-net input {:?} and condition {:?} must both be [T, {}]",
                g.shape(x_t),
                g.shape(coarse),
                self.dim
            )));
        }
        let x = linear(g, store, "post.x", x_t)?;
        let c = linear(g, store, "post.cond", coarse)?;
        let step = self.net.step_embedding(g, store, t)?;
        let h = g.add(x, c)?;
        let h = g.add_row(h, step)?;
        let h = g.relu(h)?;
        let out = self.net.forward(g, store, h, coarse, step)?;
        linear(g, store, "post.eps", out)
    }

    /// Noise `mel_g` to step `t` and score the noise estimate (unweighted MSE).
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sched: &DiffusionSchedule,
        mel_g: &Tensor,
        coarse: NodeId,
        t: usize,
        rng: &mut RngState,
    ) -> Result<NodeId> {
        sched.check_step(t)?;
        if mel_g.shape() != g.shape(coarse) {
            return Err(Error::arg(format!(
                "target {:?} and coarse {:?} spectra differ",
                mel_g.shape(),
                g.shape(coarse)
            )));
        }
        let eps = rng.normal_vec(mel_g.numel());
        let x_t = noised(sched, mel_g.data(), &eps, t);
        let x_t = g.constant(Tensor::new(mel_g.shape().to_vec(), x_t)?);
        let eps = g.constant(Tensor::new(mel_g.shape().to_vec(), eps)?);
        let eps_hat = self.forward(g, store, x_t, t, coarse)?;
        crate::pddpm::gdiff_loss(g, eps, eps_hat)
    }

    pub fn predict(&self, store: &ParamStore, x_t: &Tensor, t: usize, coarse: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let x = g.input("x_t", x_t.clone());
        let c = g.input("coarse", coarse.clone());
        let e = self.forward(&mut g, store, x, t, c)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Full reverse chain conditioned on `coarse`.
    pub fn sample(
        &self,
        store: &ParamStore,
        coarse: &Tensor,
        sched: &DiffusionSchedule,
        rng: &mut RngState,
    ) -> Result<Tensor> {
        postnet_sample(coarse.shape(), sched, rng, |x, t| {
            self.predict(store, &Tensor::new(coarse.shape().to_vec(), x.to_vec())?, t, coarse)
        })
    }
}

/// Reverse chain over a `shape`-sized sample with any noise estimator.
pub fn postnet_sample(
    shape: &[usize],
    sched: &DiffusionSchedule,
    rng: &mut RngState,
    mut estimate: impl FnMut(&[f32], usize) -> Result<Vec<f32>>,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut x = rng.normal_vec(n);
    for t in (1..=sched.steps()).rev() {
        let eps = estimate(&x, t)?;
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: t,
                op: "post-net",
            });
        }
        reverse_step(sched, &mut x, &eps, t, rng)?;
    }
    Tensor::new(shape.to_vec(), x)
}
