//! Phoneme encoder, word pooling, note encoder and singer embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{linear, sinusoidal, FftStack};
use crate::numerics::{Graph, NodeId, ParamStore, RngState, Tensor};
use crate::score::model::{Note, NoteType, Score};
use crate::score::phonemes;

pub const PITCH_VOCAB: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub fft_blocks: usize,
    pub attn_heads: usize,
    pub conv_kernel: usize,
    /// Inner width of the convolutional feed-forward.
    pub ffn_filter: usize,
    pub phoneme_vocab: usize,
    pub note_type_vocab: usize,
    pub singer_count: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            fft_blocks: 2,
            attn_heads: 2,
            conv_kernel: 5,
            ffn_filter: 128,
            phoneme_vocab: phonemes::vocab_size(),
            note_type_vocab: NoteType::ALL.len(),
            singer_count: 2,
        }
    }

    pub fn full() -> Self {
        Self {
            hidden: 256,
            fft_blocks: 4,
            ffn_filter: 1024,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.attn_heads == 0 || !self.hidden.is_multiple_of(self.attn_heads) {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of attn_heads {}",
                self.hidden, self.attn_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.phoneme_vocab == 0 || self.note_type_vocab == 0 || self.singer_count == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        Ok(())
    }
}

fn check_ids(ids: &[usize], vocab: usize, what: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::arg(format!("empty {what} sequence")));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::arg(format!("{what} id {bad} outside vocabulary of {vocab}")));
    }
    Ok(())
}

/// Embedding plus sentence-level sinusoidal positions, then FFT blocks.
#[derive(Clone, Debug)]
pub struct PhonemeEncoder {
    pub vocab: usize,
    pub hidden: usize,
    stack: FftStack,
}

impl PhonemeEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            vocab: cfg.phoneme_vocab,
            hidden: cfg.hidden,
            stack: FftStack::new(
                "phone.fft",
                cfg.fft_blocks,
                cfg.hidden,
                cfg.attn_heads,
                cfg.ffn_filter,
                cfg.conv_kernel,
            )?,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        // Unit scale so identity is not swamped by the positional code.
        store.init_normal("phone.emb", &[self.vocab, self.hidden], 1.0, rng);
        self.stack.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        check_ids(ids, self.vocab, "phoneme")?;
        let table = g.param(store, "phone.emb")?;
        let x = g.gather_rows(table, ids.to_vec())?;
        let positions: Vec<f64> = (0..ids.len()).map(|i| i as f64).collect();
        let pe = g.constant(sinusoidal(&positions, self.hidden));
        let x = g.add(x, pe)?;
        self.stack.forward(g, store, x)
    }
}

fn check_partition(counts: &[usize], total: usize, what: &str) -> Result<()> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::arg(format!("{what}: every word needs a non-empty span")));
    }
    let sum: usize = counts.iter().sum();
    if sum != total {
        return Err(Error::arg(format!("{what}: spans cover {sum} of {total} rows")));
    }
    Ok(())
}

/// `[W, P]` averaging matrix of consecutive spans.
pub fn pooling_matrix(counts: &[usize]) -> Tensor {
    let total: usize = counts.iter().sum();
    let mut m = Tensor::zeros(&[counts.len(), total]);
    let mut start = 0;
    for (w, &c) in counts.iter().enumerate() {
        for p in start..start + c {
            m.data_mut()[w * total + p] = 1.0 / c as f32;
        }
        start += c;
    }
    m
}

/// Mean of each word's rows; `counts` gives the phonemes per word.
pub fn word_pool(g: &mut Graph, h: NodeId, counts: &[usize]) -> Result<NodeId> {
    check_partition(counts, g.shape(h)[0], "word_pool")?;
    let m = g.constant(pooling_matrix(counts));
    g.matmul(m, h)
}

/// Repeat row `i` of `x` `counts[i]` times.
pub fn broadcast_rows(g: &mut Graph, x: NodeId, counts: &[usize]) -> Result<NodeId> {
    if counts.len() != g.shape(x)[0] {
        return Err(Error::arg(format!(
            "{} repeat counts for {} rows",
            counts.len(),
            g.shape(x)[0]
        )));
    }
    let index = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
        .collect();
    g.gather_rows(x, index)
}

/// Encoder view of one note.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoteInput {
    pub pitch: usize,
    pub note_type: usize,
    /// Written duration in seconds.
    pub duration: f64,
}

impl NoteInput {
    pub fn from_note(note: &Note, seconds_per_beat: f64) -> Self {
        Self {
            pitch: note.midi_pitch as usize,
            note_type: note.note_type.id(),
            duration: note.dur_beats * seconds_per_beat,
        }
    }

    pub fn from_score(score: &Score) -> Vec<Self> {
        let spb = score.seconds_per_beat();
        score.notes().map(|n| Self::from_note(n, spb)).collect()
    }
}

/// The duration input is counted in eighths of a second so that it lands
/// on the same scale as the embedding rows. Much smaller and the length
/// predictor learns to identify songs by their pitch pattern instead.
pub const DURATION_UNIT_SECONDS: f64 = 0.125;

/// Pitch embedding + type embedding + linear projection of duration.
#[derive(Clone, Debug)]
pub struct NoteEncoder {
    pub hidden: usize,
    pub type_vocab: usize,
}

impl NoteEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            hidden: cfg.hidden,
            type_vocab: cfg.note_type_vocab,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        // Unit scale per dimension, matching the layer-normed phoneme side
        // these features are summed with.
        store.init_normal("note.pitch", &[PITCH_VOCAB, self.hidden], 1.0, rng);
        store.init_normal("note.type", &[self.type_vocab, self.hidden], 1.0, rng);
        store.init_linear("note.dur", 1, self.hidden, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, notes: &[NoteInput]) -> Result<NodeId> {
        let pitches: Vec<usize> = notes.iter().map(|n| n.pitch).collect();
        let types: Vec<usize> = notes.iter().map(|n| n.note_type).collect();
        check_ids(&pitches, PITCH_VOCAB, "pitch")?;
        check_ids(&types, self.type_vocab, "note type")?;
        if let Some(n) = notes.iter().find(|n| !(n.duration.is_finite() && n.duration > 0.0)) {
            return Err(Error::arg(format!("note duration must be positive, got {}", n.duration)));
        }
        let pt = g.param(store, "note.pitch")?;
        let tt = g.param(store, "note.type")?;
        let p = g.gather_rows(pt, pitches)?;
        let t = g.gather_rows(tt, types)?;
        let d = g.constant(Tensor::column(
            notes.iter().map(|n| (n.duration / DURATION_UNIT_SECONDS) as f32).collect(),
        ));
        let d = linear(g, store, "note.dur", d)?;
        let pt = g.add(p, t)?;
        g.add(pt, d)
    }
}

#[derive(Clone, Debug)]
pub struct SingerEmbedding {
    pub count: usize,
    pub hidden: usize,
}

impl SingerEmbedding {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            count: cfg.singer_count,
            hidden: cfg.hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        store.init_normal("singer.emb", &[self.count, self.hidden], 1.0, rng);
    }

    /// `[1, hidden]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, singer_id: usize) -> Result<NodeId> {
        if singer_id >= self.count {
            return Err(Error::arg(format!(
                "singer {singer_id} outside the {} known singers",
                self.count
            )));
        }
        let table = g.param(store, "singer.emb")?;
        g.gather_rows(table, vec![singer_id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_check, DEFAULT_STEP};
    use proptest::prelude::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            hidden: 8,
            ffn_filter: 16,
            ..EncoderConfig::desk()
        }
    }

    fn weighted_sum(g: &mut Graph, y: NodeId, rng: &mut RngState) -> NodeId {
        let shape = g.shape(y).to_vec();
        let n = shape.iter().product();
        let r = g.constant(Tensor::new(shape, rng.normal_vec(n)).unwrap());
        let m = g.mul(y, r).unwrap();
        g.sum(m).unwrap()
    }

    #[test]
    fn phoneme_encoder_shapes_and_errors() {
        let cfg = small();
        let enc = PhonemeEncoder::new(&cfg).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut RngState::new(0));
        let mut g = Graph::new();
        let h = enc.forward(&mut g, &store, &[3]).unwrap();
        assert_eq!(g.shape(h), &[1, 8]);
        assert!(enc.forward(&mut g, &store, &[]).is_err());
        assert!(enc.forward(&mut g, &store, &[cfg.phoneme_vocab]).is_err());
        let a = enc.forward(&mut g, &store, &[3, 4, 5]).unwrap();
        let b = enc.forward(&mut g, &store, &[3, 4, 5]).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn phoneme_encoder_gradients() {
        let enc = PhonemeEncoder::new(&small()).unwrap();
        for seed in 0..3 {
            let mut rng = RngState::new(seed);
            let mut store = ParamStore::new();
            enc.init(&mut store, &mut rng);
            let mut g = Graph::new();
            let h = enc.forward(&mut g, &store, &[2, 7, 30, 7]).unwrap();
            let loss = weighted_sum(&mut g, h, &mut rng);
            let r = finite_difference_check(&g, loss, DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let h = g.input("h", Tensor::column(vec![1.0, 3.0]));
        let w = word_pool(&mut g, h, &[2]).unwrap();
        assert_eq!(g.value(w).data(), &[2.0]);
        let h = g.input("h2", Tensor::column(vec![1.0, 3.0, 5.0]));
        let w = word_pool(&mut g, h, &[1, 1, 1]).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 3.0, 5.0]);
        assert!(word_pool(&mut g, h, &[1, 1]).is_err());
        assert!(word_pool(&mut g, h, &[3, 0]).is_err());
    }

    #[test]
    fn zero_duration_projection_ignores_duration() {
        let enc = NoteEncoder::new(&small());
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut RngState::new(1));
        store.init_const("note.dur.w", &[1, 8], 0.0);
        let mut g = Graph::new();
        let notes = [
            NoteInput { pitch: 60, note_type: 0, duration: 0.5 },
            NoteInput { pitch: 60, note_type: 0, duration: 1.5 },
        ];
        let h = enc.forward(&mut g, &store, &notes).unwrap();
        assert_eq!(g.value(h).row(0), g.value(h).row(1));
    }

    #[test]
    fn note_encoder_checks_and_gradients() {
        let enc = NoteEncoder::new(&small());
        let mut rng = RngState::new(2);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let bad = [NoteInput { pitch: 128, note_type: 0, duration: 0.5 }];
        assert!(enc.forward(&mut g, &store, &bad).is_err());
        let bad = [NoteInput { pitch: 60, note_type: 4, duration: 0.5 }];
        assert!(enc.forward(&mut g, &store, &bad).is_err());
        let notes = [
            NoteInput { pitch: 60, note_type: 0, duration: 0.5 },
            NoteInput { pitch: 60, note_type: 0, duration: 0.5 },
            NoteInput { pitch: 0, note_type: 1, duration: 0.25 },
        ];
        let h = enc.forward(&mut g, &store, &notes).unwrap();
        assert_eq!(g.value(h).row(0), g.value(h).row(1));
        let loss = weighted_sum(&mut g, h, &mut rng);
        let r = finite_difference_check(&g, loss, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn singer_lookup() {
        let emb = SingerEmbedding::new(&small());
        let mut store = ParamStore::new();
        emb.init(&mut store, &mut RngState::new(3));
        let mut g = Graph::new();
        let a = emb.forward(&mut g, &store, 0).unwrap();
        let b = emb.forward(&mut g, &store, 0).unwrap();
        let c = emb.forward(&mut g, &store, 1).unwrap();
        assert_eq!(g.shape(a), &[1, 8]);
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        assert!(emb.forward(&mut g, &store, 2).is_err());
    }

    proptest! {
        #[test]
        fn pool_after_broadcast_is_identity(counts in prop::collection::vec(1usize..5, 1..6), seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let w = counts.len();
            let mut g = Graph::new();
            let hw = g.input("hw", Tensor::new(vec![w, 3], rng.normal_vec(3 * w)).unwrap());
            let b = broadcast_rows(&mut g, hw, &counts).unwrap();
            let p = word_pool(&mut g, b, &counts).unwrap();
            prop_assert!(g.value(p).max_abs_diff(g.value(hw)) < 1e-6);
        }

        #[test]
        fn encoders_stay_finite(seed in 0u64..100, len in 1usize..12) {
            let cfg = small();
            let enc = PhonemeEncoder::new(&cfg).unwrap();
            let mut rng = RngState::new(seed);
            let mut store = ParamStore::new();
            enc.init(&mut store, &mut rng);
            let ids: Vec<usize> = (0..len).map(|_| rng.below(cfg.phoneme_vocab)).collect();
            let mut g = Graph::new();
            let h = enc.forward(&mut g, &store, &ids).unwrap();
            prop_assert_eq!(g.shape(h), &[len, 8]);
            prop_assert!(g.value(h).is_finite());
        }
    }
}
