//! Word-level Gaussian upsampler.
//!
//! Note lengths `l` come from a small convolutional predictor. Within each
//! word the note centers are `c_n = e_n - l_n / 2` with `e` the running sum
//! of `l`, and frame `t` (counted from the word start) attends to the
//! word's notes with softmax weights `exp(-(t - c_n)^2 / (2 sigma^2))`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{conv1d, layer_norm, linear};
use crate::numerics::{Graph, NodeId, ParamStore, RngState, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthPredictorConfig {
    pub conv_layers: usize,
    pub kernel: usize,
    pub hidden: usize,
    /// Frames per unit of the output layer.
    pub frame_scale: f64,
    /// Initial output before scaling, so the first predictions sit near a
    /// typical note length.
    pub bias_init: f64,
}

impl LengthPredictorConfig {
    pub fn new(hidden: usize) -> Self {
        Self {
            conv_layers: 3,
            kernel: 5,
            hidden,
            frame_scale: 16.0,
            bias_init: 2.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LengthPredictor {
    pub cfg: LengthPredictorConfig,
}

impl LengthPredictor {
    pub fn new(cfg: LengthPredictorConfig) -> Result<Self> {
        if cfg.conv_layers == 0 {
            return Err(Error::Config("length predictor needs at least one layer".into()));
        }
        if cfg.kernel.is_multiple_of(2) {
            return Err(Error::Config("length predictor kernel must be odd".into()));
        }
        if !(cfg.frame_scale > 0.0) {
            return Err(Error::Config("frame_scale must be positive".into()));
        }
        Ok(Self { cfg })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let h = self.cfg.hidden;
        for i in 0..self.cfg.conv_layers {
            store.init_conv(&format!("dur.conv{i}"), self.cfg.kernel, h, h, rng);
            store.init_layer_norm(&format!("dur.ln{i}"), h);
        }
        store.init_linear("dur.out", h, 1, rng);
        store.init_const("dur.out.b", &[1], self.cfg.bias_init as f32);
    }

    /// `l = frame_scale * relu(linear(convnet(H_n + H_wn + s)))`, shape `[N, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_n: NodeId,
        h_wn: NodeId,
        s: NodeId,
    ) -> Result<NodeId> {
        if g.shape(h_n) != g.shape(h_wn) {
            return Err(Error::arg(format!(
                "note features {:?} and word features {:?} differ",
                g.shape(h_n),
                g.shape(h_wn)
            )));
        }
        let x = g.add(h_n, h_wn)?;
        let mut x = g.add_row(x, s)?;
        for i in 0..self.cfg.conv_layers {
            x = conv1d(g, store, &format!("dur.conv{i}"), x, self.cfg.kernel, 1)?;
            x = g.relu(x)?;
            x = layer_norm(g, store, &format!("dur.ln{i}"), x)?;
        }
        let y = linear(g, store, "dur.out", x)?;
        let y = g.relu(y)?;
        g.scale(y, self.cfg.frame_scale)
    }
}

fn check_groups(groups: &[usize], n: usize) -> Result<()> {
    if groups.contains(&0) {
        return Err(Error::arg("every word needs at least one note"));
    }
    let total: usize = groups.iter().sum();
    if total != n {
        return Err(Error::arg(format!("note groups cover {total} of {n} notes")));
    }
    Ok(())
}

/// Block lower-triangular ones: `(B l)_n` sums `l` from the word start to `n`.
fn cumsum_matrix(groups: &[usize]) -> Tensor {
    let n: usize = groups.iter().sum();
    let mut m = Tensor::zeros(&[n, n]);
    let mut start = 0;
    for &k in groups {
        for i in start..start + k {
            for j in start..=i {
                m.data_mut()[i * n + j] = 1.0;
            }
        }
        start += k;
    }
    m
}

/// Per-frame local time, per-frame word index, and the `[T, N]` mask of
/// same-word pairs.
fn frame_layout(groups: &[usize], frame_spans: &[usize]) -> (Vec<f32>, Vec<bool>) {
    let n: usize = groups.iter().sum();
    let t_total: usize = frame_spans.iter().sum();
    let mut local = Vec::with_capacity(t_total);
    let mut mask = vec![false; t_total * n];
    let mut note_start = 0;
    let mut t0 = 0;
    for (&k, &span) in groups.iter().zip(frame_spans) {
        for t in 0..span {
            local.push(t as f32);
            for j in note_start..note_start + k {
                mask[(t0 + t) * n + j] = true;
            }
        }
        note_start += k;
        t0 += span;
    }
    (local, mask)
}

/// `[T, N]` word-masked Gaussian weights from `l: [N, 1]`.
pub fn build_weights(
    g: &mut Graph,
    l: NodeId,
    groups: &[usize],
    frame_spans: &[usize],
    sigma: f64,
) -> Result<NodeId> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::arg(format!("sigma must be positive, got {sigma}")));
    }
    let n = g.shape(l)[0];
    check_groups(groups, n)?;
    if frame_spans.len() != groups.len() || frame_spans.contains(&0) {
        return Err(Error::arg("every word needs a non-empty frame span"));
    }
    let t_total: usize = frame_spans.iter().sum();
    let (local, mask) = frame_layout(groups, frame_spans);

    let b = g.constant(cumsum_matrix(groups));
    let e = g.matmul(b, l)?;
    let half = g.scale(l, 0.5)?;
    let c = g.sub(e, half)?;
    // [T, N] with every row equal to c^T
    let ones = g.constant(Tensor::full(&[t_total, 1], 1.0));
    let c_rows = g.matmul_nt(ones, c)?;
    let mut t_cols = Vec::with_capacity(t_total * n);
    for &t in &local {
        t_cols.extend(std::iter::repeat_n(t, n));
    }
    let t_mat = g.constant(Tensor::new(vec![t_total, n], t_cols)?);
    let d = g.sub(t_mat, c_rows)?;
    let d2 = g.square(d)?;
    let logits = g.scale(d2, -1.0 / (2.0 * sigma * sigma))?;
    g.masked_softmax(logits, Arc::new(mask))
}

/// `a = weights * H_n`, `[T, hidden]`.
pub fn expand_notes(g: &mut Graph, weights: NodeId, h_n: NodeId) -> Result<NodeId> {
    if g.shape(weights)[1] != g.shape(h_n)[0] {
        return Err(Error::arg(format!(
            "weights {:?} do not match note features {:?}",
            g.shape(weights),
            g.shape(h_n)
        )));
    }
    g.matmul(weights, h_n)
}

/// Mean over words of `|sum of the word's l - dur|`.
pub fn word_duration_loss(
    g: &mut Graph,
    l: NodeId,
    groups: &[usize],
    gt: Option<&[usize]>,
) -> Result<NodeId> {
    let gt = gt.ok_or_else(|| Error::arg("word duration loss needs ground-truth durations"))?;
    let n = g.shape(l)[0];
    check_groups(groups, n)?;
    if gt.len() != groups.len() {
        return Err(Error::arg(format!(
            "{} durations for {} words",
            gt.len(),
            groups.len()
        )));
    }
    let pool = g.constant(crate::encoders::pooling_matrix(groups).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    let sums = g.matmul(pool, l)?;
    let target = g.constant(Tensor::column(gt.iter().map(|&d| d as f32).collect()));
    let diff = g.sub(sums, target)?;
    let abs = g.abs(diff)?;
    g.mean(abs)
}

/// `max(1, round(sum of l))` per word.
pub fn predicted_word_durations(l: &[f32], groups: &[usize]) -> Result<Vec<usize>> {
    check_groups(groups, l.len())?;
    let mut out = Vec::with_capacity(groups.len());
    let mut start = 0;
    for &k in groups {
        let s: f64 = l[start..start + k].iter().map(|&v| v as f64).sum();
        out.push(crate::score::frames::round_half_up(s).max(1) as usize);
        start += k;
    }
    Ok(out)
}

/// Plain-value view of an alignment, for inspection and plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPlan {
    pub l: Vec<f64>,
    pub e: Vec<f64>,
    pub c: Vec<f64>,
    pub weights: Tensor,
    pub sigma: f64,
}

impl AlignmentPlan {
    pub fn new(l: &[f32], groups: &[usize], frame_spans: &[usize], sigma: f64) -> Result<Self> {
        let mut g = Graph::new();
        let ln = g.input("l", Tensor::column(l.to_vec()));
        let w = build_weights(&mut g, ln, groups, frame_spans, sigma)?;
        let mut e = Vec::with_capacity(l.len());
        let mut start = 0;
        for &k in groups {
            let mut acc = 0.0;
            for &v in &l[start..start + k] {
                acc += v as f64;
                e.push(acc);
            }
            start += k;
        }
        let l: Vec<f64> = l.iter().map(|&v| v.as_f64()).collect();
        let c = e.iter().zip(&l).map(|(e, l)| e - l / 2.0).collect();
        Ok(Self {
            l,
            e,
            c,
            weights: g.value(w).clone(),
            sigma,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_check, DEFAULT_STEP};
    use proptest::prelude::*;

    fn weights_of(l: &[f32], groups: &[usize], spans: &[usize], sigma: f64) -> Tensor {
        AlignmentPlan::new(l, groups, spans, sigma).unwrap().weights
    }

    #[test]
    fn singleton_word_gets_all_weight() {
        let w = weights_of(&[3.0], &[1], &[5], 10.0);
        assert_eq!(w.data(), &[1.0; 5]);
    }

    #[test]
    fn narrow_kernel_picks_the_nearest_center() {
        // c = [1, 3]; at t = 0 the ratio is exp(-(1 - 9) / 0.02)
        let w = weights_of(&[2.0, 2.0], &[2], &[4], 0.1);
        assert!(w.get(0, 0) as f64 >= 1.0 - 1e-8);
    }

    #[test]
    fn cross_word_entries_are_zero() {
        let w = weights_of(&[2.0, 3.0, 4.0], &[2, 1], &[5, 4], 10.0);
        for t in 0..9 {
            let row = w.row(t);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            if t < 5 {
                assert_eq!(row[2], 0.0);
            } else {
                assert_eq!(&row[..2], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn all_zero_lengths_spread_uniformly() {
        let w = weights_of(&[0.0, 0.0], &[2], &[3], 10.0);
        assert!(w.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn predictor_contract() {
        let cfg = LengthPredictorConfig {
            frame_scale: 1.0,
            ..LengthPredictorConfig::new(8)
        };
        let p = LengthPredictor::new(cfg).unwrap();
        let mut rng = RngState::new(4);
        let mut store = ParamStore::new();
        p.init(&mut store, &mut rng);
        store.init_const("dur.out.w", &[8, 1], 0.0);
        store.init_const("dur.out.b", &[1], 3.5);
        let mut g = Graph::new();
        let hn = g.input("hn", Tensor::new(vec![4, 8], rng.normal_vec(32)).unwrap());
        let hw = g.input("hw", Tensor::new(vec![4, 8], rng.normal_vec(32)).unwrap());
        let s = g.input("s", Tensor::new(vec![1, 8], rng.normal_vec(8)).unwrap());
        let l = p.forward(&mut g, &store, hn, hw, s).unwrap();
        assert_eq!(g.value(l).data(), &[3.5; 4]);
        let bad = g.input("bad", Tensor::zeros(&[3, 8]));
        assert!(p.forward(&mut g, &store, hn, bad, s).is_err());
    }

    #[test]
    fn predictor_gradients() {
        let p = LengthPredictor::new(LengthPredictorConfig::new(8)).unwrap();
        for seed in 0..5 {
            let mut rng = RngState::new(seed);
            let mut store = ParamStore::new();
            p.init(&mut store, &mut rng);
            let mut g = Graph::new();
            let hn = g.input("hn", Tensor::new(vec![5, 8], rng.normal_vec(40)).unwrap());
            let hw = g.input("hw", Tensor::new(vec![5, 8], rng.normal_vec(40)).unwrap());
            let s = g.input("s", Tensor::new(vec![1, 8], rng.normal_vec(8)).unwrap());
            let l = p.forward(&mut g, &store, hn, hw, s).unwrap();
            assert!(g.value(l).data().iter().all(|&v| v >= 0.0));
            let total = g.sum(l).unwrap();
            let r = finite_difference_check(&g, total, DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn expansion_gradient_flows_to_lengths() {
        for seed in 0..5 {
            let mut rng = RngState::new(seed);
            let mut g = Graph::new();
            let l: Vec<f32> = (0..5).map(|_| 2.0 + 6.0 * rng.uniform() as f32).collect();
            let l = g.param_value("l", &Tensor::column(l));
            let hn = g.param_value("hn", &Tensor::new(vec![5, 8], rng.normal_vec(40)).unwrap());
            let w = build_weights(&mut g, l, &[3, 2], &[14, 9], 10.0).unwrap();
            let a = expand_notes(&mut g, w, hn).unwrap();
            let r = g.constant(Tensor::new(vec![23, 8], rng.normal_vec(184)).unwrap());
            let m = g.mul(a, r).unwrap();
            let total = g.sum(m).unwrap();
            let rep = finite_difference_check(&g, total, DEFAULT_STEP).unwrap();
            assert!(rep.max_rel_error < 1e-3, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn expansion_examples() {
        let mut g = Graph::new();
        let l = g.input("l", Tensor::column(vec![2.0, 5.0]));
        let w = build_weights(&mut g, l, &[2], &[7], 3.0).unwrap();
        let same = g.input("h", Tensor::from_rows(&[vec![1.0, -2.0], vec![1.0, -2.0]]).unwrap());
        let a = expand_notes(&mut g, w, same).unwrap();
        for t in 0..7 {
            assert!((g.value(a).get(t, 0) - 1.0).abs() < 1e-6);
            assert!((g.value(a).get(t, 1) + 2.0).abs() < 1e-6);
        }
        let wrong = g.input("x", Tensor::zeros(&[3, 2]));
        assert!(expand_notes(&mut g, w, wrong).is_err());
    }

    #[test]
    fn duration_loss_examples() {
        let mut g = Graph::new();
        let l = g.input("l", Tensor::column(vec![4.0, 6.0]));
        let d = word_duration_loss(&mut g, l, &[2], Some(&[12])).unwrap();
        assert_eq!(g.value(d).item(), 2.0);
        let d = word_duration_loss(&mut g, l, &[1, 1], Some(&[4, 6])).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        assert!(word_duration_loss(&mut g, l, &[2], None).is_err());
    }

    #[test]
    fn predicted_durations_round_and_clamp() {
        assert_eq!(predicted_word_durations(&[2.4, 2.4], &[2]).unwrap(), vec![5]);
        assert_eq!(predicted_word_durations(&[0.0, 0.0], &[1, 1]).unwrap(), vec![1, 1]);
    }

    fn nearest_center(c: &[f64], t: f64) -> usize {
        let mut best = 0;
        for (i, &ci) in c.iter().enumerate() {
            if (t - ci).abs() < (t - c[best]).abs() {
                best = i;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn narrow_kernels_match_nearest_center(l in prop::collection::vec(1.0f32..12.0, 1..5)) {
            let span = l.iter().sum::<f32>().ceil() as usize + 2;
            let plan = AlignmentPlan::new(&l, &[l.len()], &[span], 0.1).unwrap();
            for t in 0..span {
                let tf = t as f64;
                let mut d: Vec<f64> = plan.c.iter().map(|c| (tf - c).abs()).collect();
                d.sort_by(f64::total_cmp);
                // ties make the oracle ambiguous
                if d.len() > 1 && d[1] - d[0] < 0.2 {
                    continue;
                }
                let k = nearest_center(&plan.c, tf);
                prop_assert!(plan.weights.get(t, k) > 0.999);
            }
        }

        #[test]
        fn centers_are_monotone(l in prop::collection::vec(0.0f32..20.0, 1..8)) {
            let plan = AlignmentPlan::new(&l, &[l.len()], &[4], 10.0).unwrap();
            for i in 1..l.len() {
                prop_assert!(plan.c[i] >= plan.c[i - 1]);
                prop_assert!(plan.e[i] >= plan.e[i - 1]);
            }
        }

        #[test]
        fn no_note_is_skipped(l in prop::collection::vec(1.5f32..15.0, 1..6)) {
            let span = crate::score::frames::round_half_up(l.iter().map(|&v| v as f64).sum()).max(1) as usize;
            let plan = AlignmentPlan::new(&l, &[l.len()], &[span], 10.0).unwrap();
            for n in 0..l.len() {
                prop_assert!((0..span).any(|t| plan.weights.get(t, n) > 0.0));
            }
        }

        #[test]
        fn rounding_is_monotone(a in 0.0f32..50.0, b in 0.0f32..50.0) {
            let da = predicted_word_durations(&[a], &[1]).unwrap()[0];
            let db = predicted_word_durations(&[b], &[1]).unwrap()[0];
            if a <= b {
                prop_assert!(da <= db);
            }
        }
    }
}
