//! Word-level positional attention: frames query the phonemes of their own
//! word through position codes that restart at every word boundary.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::nn::{linear, sinusoidal};
use crate::numerics::{Graph, NodeId, ParamStore, RngState, Tensor};

/// Sinusoidal codes of word-relative positions: `0..span` for each span.
pub fn word_relative_codes(spans: &[usize], dim: usize) -> Tensor {
    let positions: Vec<f64> = spans
        .iter()
        .flat_map(|&s| (0..s).map(|i| i as f64))
        .collect();
    sinusoidal(&positions, dim)
}

#[derive(Clone, Debug)]
pub struct WordAttention {
    pub hidden: usize,
}

impl WordAttention {
    pub fn new(hidden: usize) -> Self {
        Self { hidden }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        store.init_linear("wattn.key", 2 * self.hidden, self.hidden, rng);
    }

    /// `H_epd = softmax(P_m H_k^T / sqrt(d)) H` with `H_k = W [H, P_ph]`,
    /// masked to same-word pairs. Returns `[T, hidden]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: NodeId,
        phone_spans: &[usize],
        frame_spans: &[usize],
    ) -> Result<NodeId> {
        Ok(self.attend(g, store, h, phone_spans, frame_spans)?.0)
    }

    /// As [`forward`](Self::forward), also returning the `[T, P]` attention.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: NodeId,
        phone_spans: &[usize],
        frame_spans: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let (p, d) = (g.shape(h)[0], g.shape(h)[1]);
        if d != self.hidden {
            return Err(Error::arg(format!("features have {d} channels, expected {}", self.hidden)));
        }
        if phone_spans.len() != frame_spans.len() {
            return Err(Error::arg(format!(
                "{} phoneme spans but {} frame spans",
                phone_spans.len(),
                frame_spans.len()
            )));
        }
        if phone_spans.contains(&0) || frame_spans.contains(&0) {
            return Err(Error::arg("empty word span"));
        }
        if phone_spans.iter().sum::<usize>() != p {
            return Err(Error::arg("phoneme spans do not cover the phoneme sequence"));
        }
        let t: usize = frame_spans.iter().sum();
        let p_ph = g.constant(word_relative_codes(phone_spans, d));
        let p_m = g.constant(word_relative_codes(frame_spans, d));
        let cat = g.concat_cols(&[h, p_ph])?;
        let keys = linear(g, store, "wattn.key", cat)?;
        let logits = g.matmul_nt(p_m, keys)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;

        let mut mask = vec![false; t * p];
        let (mut t0, mut p0) = (0, 0);
        for (&ps, &fs) in phone_spans.iter().zip(frame_spans) {
            for tt in t0..t0 + fs {
                mask[tt * p + p0..tt * p + p0 + ps].fill(true);
            }
            t0 += fs;
            p0 += ps;
        }
        let attn = g.masked_softmax(logits, Arc::new(mask))?;
        Ok((g.matmul(attn, h)?, attn))
    }
}
