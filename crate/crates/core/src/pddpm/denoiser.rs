//! Non-causal WaveNet denoisers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{conv1d, linear, sinusoidal};
use crate::numerics::{Graph, NodeId, ParamStore, RngState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveNetConfig {
    pub layers: usize,
    pub kernel: usize,
    pub residual_channels: usize,
    /// Dilation doubles each layer and resets every `dilation_cycle` layers.
    pub dilation_cycle: usize,
}

impl WaveNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.residual_channels == 0 || self.dilation_cycle == 0 {
            return Err(Error::Config("wavenet sizes must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("wavenet kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        1 << (layer % self.dilation_cycle)
    }
}

/// Gated residual stack with per-layer conditioning and skip connections.
#[derive(Clone, Debug)]
pub struct WaveNet {
    pub prefix: String,
    pub cfg: WaveNetConfig,
    pub cond_channels: usize,
}

impl WaveNet {
    pub fn new(prefix: impl Into<String>, cfg: WaveNetConfig, cond_channels: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            cfg,
            cond_channels,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let (p, r) = (&self.prefix, self.cfg.residual_channels);
        store.init_linear(&format!("{p}.step1"), r, 4 * r, rng);
        store.init_linear(&format!("{p}.step2"), 4 * r, r, rng);
        for i in 0..self.cfg.layers {
            store.init_linear(&format!("{p}.{i}.step"), r, r, rng);
            store.init_conv(&format!("{p}.{i}.dil"), self.cfg.kernel, r, 2 * r, rng);
            store.init_linear(&format!("{p}.{i}.cond"), self.cond_channels, 2 * r, rng);
            store.init_linear(&format!("{p}.{i}.out"), r, 2 * r, rng);
        }
        store.init_linear(&format!("{p}.skip"), r, r, rng);
    }

    /// `[1, r]` embedding of diffusion step `t`.
    pub fn step_embedding(&self, g: &mut Graph, store: &ParamStore, t: usize) -> Result<NodeId> {
        let p = &self.prefix;
        let e = g.constant(sinusoidal(&[t as f64], self.cfg.residual_channels));
        let e = linear(g, store, &format!("{p}.step1"), e)?;
        let e = g.relu(e)?;
        linear(g, store, &format!("{p}.step2"), e)
    }

    /// Runs the residual layers over `x: [T, r]` and returns the `[T, r]`
    /// post-activation skip sum.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: NodeId,
        cond: NodeId,
        step: NodeId,
    ) -> Result<NodeId> {
        let (p, r) = (&self.prefix, self.cfg.residual_channels);
        let mut skip: Option<NodeId> = None;
        let half = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..self.cfg.layers {
            let s = linear(g, store, &format!("{p}.{i}.step"), step)?;
            let h = g.add_row(x, s)?;
            let h = conv1d(g, store, &format!("{p}.{i}.dil"), h, self.cfg.kernel, self.cfg.dilation(i))?;
            let c = linear(g, store, &format!("{p}.{i}.cond"), cond)?;
            let h = g.add(h, c)?;
            let filt = g.slice_cols(h, 0, r)?;
            let gate = g.slice_cols(h, r, 2 * r)?;
            let filt = g.tanh(filt)?;
            let gate = g.sigmoid(gate)?;
            let h = g.mul(filt, gate)?;
            let o = linear(g, store, &format!("{p}.{i}.out"), h)?;
            let res = g.slice_cols(o, 0, r)?;
            let sk = g.slice_cols(o, r, 2 * r)?;
            let xr = g.add(x, res)?;
            x = g.scale(xr, half)?;
            skip = Some(match skip {
                None => sk,
                Some(acc) => g.add(acc, sk)?,
            });
        }
        let skip = skip.expect("at least one layer");
        let skip = g.scale(skip, 1.0 / (self.cfg.layers as f64).sqrt())?;
        let skip = linear(g, store, &format!("{p}.skip"), skip)?;
        g.relu(skip)
    }
}

/// Joint F0/UV denoiser: predicts the Gaussian noise on F0 and logits of
/// the clean UV category.
#[derive(Clone, Debug)]
pub struct PitchDenoiser {
    pub net: WaveNet,
    pub hidden: usize,
    pub categories: usize,
}

impl PitchDenoiser {
    pub fn new(cfg: WaveNetConfig, hidden: usize, categories: usize) -> Result<Self> {
        if categories < 2 {
            return Err(Error::Config("need at least two UV categories".into()));
        }
        Ok(Self {
            net: WaveNet::new("pitch.wn", cfg, hidden)?,
            hidden,
            categories,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let r = self.net.cfg.residual_channels;
        store.init_linear("pitch.x", 1, r, rng);
        store.init_normal("pitch.uv", &[self.categories, r], 1.0, rng);
        store.init_linear("pitch.cond", self.hidden, r, rng);
        self.net.init(store, rng);
        store.init_linear("pitch.eps", r, 1, rng);
        store.init_linear("pitch.logits", r, self.categories, rng);
    }

    /// Returns `(eps_hat [T, 1], logits [T, K])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: NodeId,
        y_t: NodeId,
        t: usize,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let n = g.shape(cond)[0];
        if g.shape(x_t) != [n, 1] || g.shape(y_t) != [n, self.categories] {
            return Err(Error::arg(format!(
                "denoiser inputs {:?} / {:?} do not match {n} condition frames",
                g.shape(x_t),
                g.shape(y_t)
            )));
        }
        let x = linear(g, store, "pitch.x", x_t)?;
        let table = g.param(store, "pitch.uv")?;
        let y = g.matmul(y_t, table)?;
        let c = linear(g, store, "pitch.cond", cond)?;
        let step = self.net.step_embedding(g, store, t)?;
        let h = g.add(x, y)?;
        let h = g.add(h, c)?;
        let h = g.add_row(h, step)?;
        let h = g.relu(h)?;
        let out = self.net.forward(g, store, h, cond, step)?;
        let eps = linear(g, store, "pitch.eps", out)?;
        let logits = linear(g, store, "pitch.logits", out)?;
        Ok((eps, logits))
    }

    /// Plain-value evaluation for sampling.
    pub fn predict(
        &self,
        store: &ParamStore,
        x_t: &[f32],
        y_t: &[f32],
        t: usize,
        cond: &Tensor,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut g = Graph::new();
        let x = g.input("x_t", Tensor::column(x_t.to_vec()));
        let y = g.input("y_t", Tensor::new(vec![x_t.len(), self.categories], y_t.to_vec())?);
        let c = g.input("cond", cond.clone());
        let (e, l) = self.forward(&mut g, store, x, y, t, c)?;
        Ok((g.value(e).data().to_vec(), g.value(l).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_check, DEFAULT_STEP};

    pub(crate) fn small_cfg() -> WaveNetConfig {
        WaveNetConfig {
            layers: 3,
            kernel: 3,
            residual_channels: 8,
            dilation_cycle: 2,
        }
    }

    fn setup(seed: u64) -> (PitchDenoiser, ParamStore, RngState) {
        let mut rng = RngState::new(seed);
        let d = PitchDenoiser::new(small_cfg(), 8, 2).unwrap();
        let mut store = ParamStore::new();
        d.init(&mut store, &mut rng);
        (d, store, rng)
    }

    fn one_hot_rows(n: usize, rng: &mut RngState) -> Tensor {
        let mut y = vec![0.0; 2 * n];
        for i in 0..n {
            y[2 * i + rng.below(2)] = 1.0;
        }
        Tensor::new(vec![n, 2], y).unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let (d, store, mut rng) = setup(0);
        let cond = Tensor::new(vec![16, 8], rng.normal_vec(128)).unwrap();
        let x = rng.normal_vec(16);
        let y = one_hot_rows(16, &mut rng);
        let (e1, l1) = d.predict(&store, &x, y.data(), 5, &cond).unwrap();
        let (e2, l2) = d.predict(&store, &x, y.data(), 5, &cond).unwrap();
        assert_eq!((e1.len(), l1.len()), (16, 32));
        assert_eq!((e1, l1), (e2, l2));
        assert!(d.predict(&store, &x[..15], y.data(), 5, &cond).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let (d, store, mut rng) = setup(seed);
            let mut g = Graph::new();
            let x = g.input("x", Tensor::column(rng.normal_vec(16)));
            let y = g.input("y", one_hot_rows(16, &mut rng));
            let c = g.input("c", Tensor::new(vec![16, 8], rng.normal_vec(128)).unwrap());
            let (e, l) = d.forward(&mut g, &store, x, y, 1 + rng.below(100), c).unwrap();
            let re = g.constant(Tensor::column(rng.normal_vec(16)));
            let rl = g.constant(Tensor::new(vec![16, 2], rng.normal_vec(32)).unwrap());
            let a = g.mul(e, re).unwrap();
            let b = g.mul(l, rl).unwrap();
            let a = g.sum(a).unwrap();
            let b = g.sum(b).unwrap();
            let loss = g.add(a, b).unwrap();
            let rep = finite_difference_check(&g, loss, DEFAULT_STEP).unwrap();
            assert!(rep.max_rel_error < 1e-3, "seed {seed}: {rep:?}");
        }
    }
}
