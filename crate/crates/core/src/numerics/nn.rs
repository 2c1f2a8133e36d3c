//! Reusable layers built on [`Graph`]. Each layer owns a name prefix; its
//! parameters live in a [`ParamStore`] under `"{prefix}.*"`.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn conv1d(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    kernel: usize,
    dilation: usize,
) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.conv1d(x, w, b, kernel, dilation)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gain = g.param(store, &format!("{prefix}.g"))?;
    let bias = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias)
}

/// Sinusoidal encoding of (possibly fractional) positions, `[len, dim]`.
/// Even columns hold sines and odd columns cosines of geometrically spaced
/// frequencies.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for j in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let angle = p * freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("numel")
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub hidden: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden {hidden} must be divisible by {heads} attention heads"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            hidden,
            heads,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        store.init_linear(&format!("{}.qkv", self.prefix), self.hidden, 3 * self.hidden, rng);
        store.init_linear(&format!("{}.out", self.prefix), self.hidden, self.hidden, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.hidden;
        let dh = h / self.heads;
        let qkv = linear(g, store, &format!("{}.qkv", self.prefix), x)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = g.slice_cols(qkv, i * dh, (i + 1) * dh)?;
            let k = g.slice_cols(qkv, h + i * dh, h + (i + 1) * dh)?;
            let v = g.slice_cols(qkv, 2 * h + i * dh, 2 * h + (i + 1) * dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let p = g.softmax(scores)?;
            heads.push(g.matmul(p, v)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        linear(g, store, &format!("{}.out", self.prefix), cat)
    }
}

/// Feed-forward transformer block: self-attention and a convolutional
/// feed-forward, each wrapped in a residual connection and post-layer-norm.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub prefix: String,
    pub hidden: usize,
    pub filter: usize,
    pub kernel: usize,
    attn: MultiHeadAttention,
}

impl FftBlock {
    pub fn new(
        prefix: impl Into<String>,
        hidden: usize,
        heads: usize,
        filter: usize,
        kernel: usize,
    ) -> Result<Self> {
        let prefix = prefix.into();
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel {kernel} must be odd")));
        }
        Ok(Self {
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), hidden, heads)?,
            prefix,
            hidden,
            filter,
            kernel,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let p = &self.prefix;
        self.attn.init(store, rng);
        store.init_layer_norm(&format!("{p}.ln1"), self.hidden);
        store.init_conv(&format!("{p}.ff1"), self.kernel, self.hidden, self.filter, rng);
        store.init_conv(&format!("{p}.ff2"), 1, self.filter, self.hidden, rng);
        store.init_layer_norm(&format!("{p}.ln2"), self.hidden);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let p = &self.prefix;
        let a = self.attn.forward(g, store, x)?;
        let x = g.add(x, a)?;
        let x = layer_norm(g, store, &format!("{p}.ln1"), x)?;
        let f = conv1d(g, store, &format!("{p}.ff1"), x, self.kernel, 1)?;
        let f = g.relu(f)?;
        let f = conv1d(g, store, &format!("{p}.ff2"), f, 1, 1)?;
        let x = g.add(x, f)?;
        layer_norm(g, store, &format!("{p}.ln2"), x)
    }
}

#[derive(Clone, Debug)]
pub struct FftStack {
    pub blocks: Vec<FftBlock>,
}

impl FftStack {
    pub fn new(
        prefix: &str,
        layers: usize,
        hidden: usize,
        heads: usize,
        filter: usize,
        kernel: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| FftBlock::new(format!("{prefix}.{i}"), hidden, heads, filter, kernel))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: NodeId) -> Result<NodeId> {
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_check, DEFAULT_STEP};

    fn weighted_sum(g: &mut Graph, y: NodeId, rng: &mut RngState) -> NodeId {
        let shape = g.shape(y).to_vec();
        let n = shape.iter().product();
        let r = g.constant(Tensor::new(shape, rng.normal_vec(n)).unwrap());
        let m = g.mul(y, r).unwrap();
        g.sum(m).unwrap()
    }

    #[test]
    fn fft_block_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = RngState::new(seed);
            let block = FftBlock::new("blk", 8, 2, 16, 5).unwrap();
            let mut store = ParamStore::new();
            block.init(&mut store, &mut rng);
            let mut g = Graph::new();
            let x = g.input("x", Tensor::new(vec![6, 8], rng.normal_vec(48)).unwrap());
            let y = block.forward(&mut g, &store, x).unwrap();
            let loss = weighted_sum(&mut g, y, &mut rng);
            let r = finite_difference_check(&g, loss, DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        assert!(MultiHeadAttention::new("a", 10, 3).is_err());
    }

    #[test]
    fn sinusoidal_position_zero() {
        let t = sinusoidal(&[0.0], 4);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
