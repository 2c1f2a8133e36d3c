//! The assembled network: encoders, upsampler, word attention, pitch
//! denoiser, spectral decoder and post-net.

use crate::align::{build_weights, expand_notes, predicted_word_durations, word_duration_loss, LengthPredictor};
use crate::encoders::{broadcast_rows, word_pool, NoteEncoder, NoteInput, PhonemeEncoder, SingerEmbedding};
use crate::error::{Error, Result};
use crate::melstack::{mel_loss, MelDecoder, PitchEmbedding, PostNet};
use crate::numerics::nn::linear;
use crate::numerics::{Graph, NodeId, ParamStore, RngState, Tensor};
use crate::pddpm::multinomial::mdiff_loss;
use crate::pddpm::sampler::PitchEstimator;
use crate::pddpm::{gaussian_forward, gdiff_loss, multinomial_forward, sample_pitch, DiffusionSchedule, PitchDenoiser};
use crate::score::{phonemes, F0Stats, Score, Song, UV_CATEGORIES};
use crate::wordattn::WordAttention;

use super::config::ModelConfig;

/// Index views of a score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreInputs {
    pub phone_ids: Vec<usize>,
    pub phone_counts: Vec<usize>,
    pub note_counts: Vec<usize>,
    pub notes: Vec<NoteInput>,
    pub singer: usize,
}

impl ScoreInputs {
    pub fn new(score: &Score) -> Result<Self> {
        score.validate()?;
        let phone_ids = score
            .words
            .iter()
            .flat_map(|w| w.phonemes.iter())
            .map(|p| phonemes::id_of(p).ok_or_else(|| Error::Validation(format!("unknown phoneme {p:?}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            phone_ids,
            phone_counts: score.words.iter().map(|w| w.phonemes.len()).collect(),
            note_counts: score.words.iter().map(|w| w.notes.len()).collect(),
            notes: NoteInput::from_score(score),
            singer: score.singer_id as usize,
        })
    }
}

/// One training song in model units.
#[derive(Clone, Debug)]
pub struct Example {
    pub inputs: ScoreInputs,
    pub spans: Vec<usize>,
    /// Standardized F0, `[T]`.
    pub f0: Vec<f32>,
    /// One-hot UV rows, `[T * K]`.
    pub uv: Vec<f32>,
    /// `[T, spectral_dim]`.
    pub mel: Tensor,
}

impl Example {
    pub fn new(song: &Song, stats: &F0Stats) -> Result<Self> {
        let spans = song
            .score
            .gt_durations()
            .ok_or_else(|| Error::arg("training songs need ground-truth word durations"))?;
        if spans.iter().sum::<usize>() != song.n_frames() {
            return Err(Error::arg("word durations do not cover the track"));
        }
        Ok(Self {
            inputs: ScoreInputs::new(&song.score)?,
            spans,
            f0: stats.standardize(&song.pitch.f0),
            uv: song.pitch.uv.iter().flatten().copied().collect(),
            mel: Tensor::new(vec![song.n_frames(), crate::score::SPECTRAL_DIM], song.spectral.flat())?,
        })
    }

    pub fn frames(&self) -> usize {
        self.f0.len()
    }

    /// Words `[w0, w1)` as a standalone example.
    pub fn window(&self, w0: usize, w1: usize) -> Result<Self> {
        let words = self.spans.len();
        if !(w0 < w1 && w1 <= words) {
            return Err(Error::arg(format!("word window {w0}..{w1} outside {words} words")));
        }
        let offset = |counts: &[usize], w: usize| counts[..w].iter().sum::<usize>();
        let (p0, p1) = (offset(&self.inputs.phone_counts, w0), offset(&self.inputs.phone_counts, w1));
        let (n0, n1) = (offset(&self.inputs.note_counts, w0), offset(&self.inputs.note_counts, w1));
        let (t0, t1) = (offset(&self.spans, w0), offset(&self.spans, w1));
        let dim = self.mel.cols();
        Ok(Self {
            inputs: ScoreInputs {
                phone_ids: self.inputs.phone_ids[p0..p1].to_vec(),
                phone_counts: self.inputs.phone_counts[w0..w1].to_vec(),
                note_counts: self.inputs.note_counts[w0..w1].to_vec(),
                notes: self.inputs.notes[n0..n1].to_vec(),
                singer: self.inputs.singer,
            },
            spans: self.spans[w0..w1].to_vec(),
            f0: self.f0[t0..t1].to_vec(),
            uv: self.uv[t0 * UV_CATEGORIES..t1 * UV_CATEGORIES].to_vec(),
            mel: Tensor::new(vec![t1 - t0, dim], self.mel.data()[t0 * dim..t1 * dim].to_vec())?,
        })
    }
}

/// Graph nodes shared by training and inference.
#[derive(Clone, Debug)]
pub struct Frontend {
    /// Predicted note lengths `[N, 1]`.
    pub l: NodeId,
    /// Expanded lyric feature `[T, hidden]`.
    pub h_epd: NodeId,
    /// Pitch condition `H_epd + a + s`, `[T, hidden]`.
    pub cond: NodeId,
    /// Singer row `[1, hidden]`.
    pub s: NodeId,
    pub spans: Vec<usize>,
}

/// Named stage-1 loss terms for one song.
#[derive(Clone, Debug)]
pub struct Stage1Terms {
    pub names: [&'static str; 4],
    pub nodes: [NodeId; 4],
}

impl Stage1Terms {
    pub fn total(&self, g: &mut Graph) -> Result<NodeId> {
        let a = g.add(self.nodes[0], self.nodes[1])?;
        let b = g.add(self.nodes[2], self.nodes[3])?;
        g.add(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub sched: DiffusionSchedule,
    phone: PhonemeEncoder,
    note: NoteEncoder,
    singer: SingerEmbedding,
    length: LengthPredictor,
    wattn: WordAttention,
    pitch: PitchDenoiser,
    pemb: PitchEmbedding,
    decoder: MelDecoder,
    post: PostNet,
}

pub const POSTNET_PREFIX: &str = "post.";

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        Ok(Self {
            sched: cfg.schedule()?,
            phone: PhonemeEncoder::new(e)?,
            note: NoteEncoder::new(e),
            singer: SingerEmbedding::new(e),
            length: LengthPredictor::new(cfg.length.clone())?,
            wattn: WordAttention::new(e.hidden),
            pitch: PitchDenoiser::new(cfg.denoiser.clone(), e.hidden, UV_CATEGORIES)?,
            pemb: PitchEmbedding {
                hidden: e.hidden,
                categories: UV_CATEGORIES,
            },
            decoder: MelDecoder::new(
                e.hidden,
                cfg.mel.decoder_fft_blocks,
                e.attn_heads,
                e.ffn_filter,
                e.conv_kernel,
                cfg.mel.spectral_dim,
            )?,
            post: PostNet::new(cfg.mel.postnet.clone(), cfg.mel.spectral_dim)?,
            cfg,
        })
    }

    pub fn init(&self, rng: &RngState) -> ParamStore {
        let mut store = ParamStore::new();
        let mut r = rng.named("init");
        self.phone.init(&mut store, &mut r);
        self.note.init(&mut store, &mut r);
        self.singer.init(&mut store, &mut r);
        self.length.init(&mut store, &mut r);
        self.wattn.init(&mut store, &mut r);
        self.pitch.init(&mut store, &mut r);
        let h = self.cfg.encoder.hidden;
        if !self.cfg.variant.uv_diffusion {
            store.init_linear("uvhead.0", h, h, &mut r);
            store.init_linear("uvhead.1", h, UV_CATEGORIES, &mut r);
        }
        if !self.cfg.variant.f0_diffusion {
            store.init_linear("f0head.0", h, h, &mut r);
            store.init_linear("f0head.1", h, 1, &mut r);
        }
        self.pemb.init(&mut store, &mut r);
        self.decoder.init(&mut store, &mut r);
        self.post.init(&mut store, &mut r);
        store
    }

    pub fn postnet(&self) -> &PostNet {
        &self.post
    }

    pub fn pitch_denoiser(&self) -> &PitchDenoiser {
        &self.pitch
    }

    /// Encode, predict note lengths and expand to frames. With `spans` the
    /// given word durations are used; otherwise the predicted ones.
    pub fn frontend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &ScoreInputs,
        spans: Option<&[usize]>,
    ) -> Result<Frontend> {
        let h = self.phone.forward(g, store, &inputs.phone_ids)?;
        let h_w = word_pool(g, h, &inputs.phone_counts)?;
        let h_wn = broadcast_rows(g, h_w, &inputs.note_counts)?;
        let h_n = self.note.forward(g, store, &inputs.notes)?;
        let s = self.singer.forward(g, store, inputs.singer)?;
        let l = self.length.forward(g, store, h_n, h_wn, s)?;
        let spans = match spans {
            Some(s) => s.to_vec(),
            None => predicted_word_durations(g.value(l).data(), &inputs.note_counts)?,
        };
        let w = build_weights(g, l, &inputs.note_counts, &spans, self.cfg.sigma)?;
        let a = expand_notes(g, w, h_n)?;
        let h_epd = self.wattn.forward(g, store, h, &inputs.phone_counts, &spans)?;
        let cond = g.add(h_epd, a)?;
        let cond = g.add_row(cond, s)?;
        Ok(Frontend {
            l,
            h_epd,
            cond,
            s,
            spans,
        })
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, prefix: &str, cond: NodeId) -> Result<NodeId> {
        let x = linear(g, store, &format!("{prefix}.0"), cond)?;
        let x = g.relu(x)?;
        linear(g, store, &format!("{prefix}.1"), x)
    }

    fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fe: &Frontend,
        f0: Vec<f32>,
        uv: Vec<f32>,
    ) -> Result<NodeId> {
        let t = f0.len();
        let f0 = g.constant(Tensor::column(f0));
        let uv = g.constant(Tensor::new(vec![t, UV_CATEGORIES], uv)?);
        let p = self.pemb.forward(g, store, f0, uv)?;
        self.decoder.forward(g, store, fe.h_epd, p, fe.s)
    }

    /// The four stage-1 terms for one example, teacher-forced on the
    /// ground-truth word durations and pitch.
    pub fn stage1_terms(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &Example,
        rng: &mut RngState,
    ) -> Result<Stage1Terms> {
        self.stage1_terms_with(g, store, ex, 1, rng)
    }

    /// As [`stage1_terms`](Self::stage1_terms), with the diffusion terms
    /// averaged over `draws` independent `(t, noise)` draws that share one
    /// encoder pass.
    pub fn stage1_terms_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &Example,
        draws: usize,
        rng: &mut RngState,
    ) -> Result<Stage1Terms> {
        if draws == 0 {
            return Err(Error::arg("need at least one diffusion draw"));
        }
        let fe = self.frontend(g, store, &ex.inputs, Some(&ex.spans))?;
        let dur = word_duration_loss(g, fe.l, &ex.inputs.note_counts, Some(&ex.spans))?;
        let t_frames = ex.frames();
        let k = UV_CATEGORIES;
        let v = self.cfg.variant;

        let mut gdiff = Vec::with_capacity(draws);
        let mut mdiff = Vec::with_capacity(draws);
        for _ in 0..draws {
            let t = 1 + rng.below(self.sched.steps());
            let (x_t, eps) = if v.f0_diffusion {
                gaussian_forward(&self.sched, &ex.f0, t, rng)?
            } else {
                (vec![0.0; t_frames], vec![0.0; t_frames])
            };
            let y_t = if v.uv_diffusion {
                multinomial_forward(&self.sched, &ex.uv, k, t, rng)?
            } else {
                vec![0.0; t_frames * k]
            };
            let x_node = g.constant(Tensor::column(x_t));
            let y_node = g.constant(Tensor::new(vec![t_frames, k], y_t.clone())?);
            let (eps_hat, logits) = self.pitch.forward(g, store, x_node, y_node, t, fe.cond)?;
            if v.f0_diffusion {
                let eps = g.constant(Tensor::column(eps));
                gdiff.push(gdiff_loss(g, eps, eps_hat)?);
            }
            if v.uv_diffusion {
                mdiff.push(mdiff_loss(g, &self.sched, &ex.uv, &y_t, logits, t)?);
            }
        }

        let (f0_name, f0_term) = if v.f0_diffusion {
            ("gdiff", mean_of(g, &gdiff)?)
        } else {
            let pred = self.head(g, store, "f0head", fe.cond)?;
            let target = g.constant(Tensor::column(ex.f0.clone()));
            let d = g.sub(pred, target)?;
            let d = g.abs(d)?;
            ("f0_l1", g.mean(d)?)
        };
        let (uv_name, uv_term) = if v.uv_diffusion {
            ("mdiff", mean_of(g, &mdiff)?)
        } else {
            let logits = self.head(g, store, "uvhead", fe.cond)?;
            let lp = g.log_softmax(logits)?;
            let y0 = g.constant(Tensor::new(vec![t_frames, k], ex.uv.clone())?);
            let nll = g.mul(lp, y0)?;
            let nll = g.sum(nll)?;
            ("uv_ce", g.scale(nll, -1.0 / t_frames as f64)?)
        };

        let mel_p = self.decode(g, store, &fe, ex.f0.clone(), ex.uv.clone())?;
        let target = g.constant(ex.mel.clone());
        let mel = mel_loss(g, mel_p, target)?;
        Ok(Stage1Terms {
            names: [f0_name, uv_name, "dur", "mel"],
            nodes: [f0_term, uv_term, dur, mel],
        })
    }

    /// Coarse decoder output with teacher-forced pitch and durations; the
    /// post-net's training condition.
    pub fn coarse_teacher_forced(&self, store: &ParamStore, ex: &Example) -> Result<Tensor> {
        let mut g = Graph::new();
        let fe = self.frontend(&mut g, store, &ex.inputs, Some(&ex.spans))?;
        let mel = self.decode(&mut g, store, &fe, ex.f0.clone(), ex.uv.clone())?;
        Ok(g.value(mel).clone())
    }

    /// Full inference path. `spans` pins the word durations (evaluation
    /// against ground truth); otherwise the predicted ones are used.
    pub fn infer(
        &self,
        store: &ParamStore,
        stats: &F0Stats,
        inputs: &ScoreInputs,
        spans: Option<&[usize]>,
        refine: bool,
        rng: &RngState,
    ) -> Result<Inference> {
        let mut g = Graph::new();
        let fe = self.frontend(&mut g, store, inputs, spans)?;
        let l = g.value(fe.l).data().to_vec();
        let predicted = predicted_word_durations(&l, &inputs.note_counts)?;
        let cond = g.value(fe.cond).clone();
        let frames = cond.rows();
        let v = self.cfg.variant;

        let uv_head = if v.uv_diffusion {
            None
        } else {
            let n = self.head(&mut g, store, "uvhead", fe.cond)?;
            Some(g.value(n).data().to_vec())
        };
        let est = VariantEstimator {
            model: self,
            store,
            cond: &cond,
            uv_logits: uv_head,
        };
        let mut pitch_rng = rng.named("pitch");
        let sample = sample_pitch(&est, frames, &self.sched, &mut pitch_rng, self.cfg.sample_final_uv)?;
        let f0_std = if v.f0_diffusion {
            sample.f0
        } else {
            let n = self.head(&mut g, store, "f0head", fe.cond)?;
            g.value(n).data().to_vec()
        };

        let mel = self.decode(&mut g, store, &fe, f0_std.clone(), sample.uv.clone())?;
        let coarse = g.value(mel).clone();
        let refined = if refine {
            Some(self.post.sample(store, &coarse, &self.sched, &mut rng.named("post"))?)
        } else {
            None
        };
        let unvoiced = sample
            .uv
            .chunks_exact(UV_CATEGORIES)
            .map(|r| r[crate::score::tracks::UNVOICED] == 1.0)
            .collect();
        Ok(Inference {
            f0: stats.destandardize(&f0_std),
            unvoiced,
            coarse,
            refined,
            word_durations: fe.spans,
            predicted_word_durations: predicted,
            note_lengths: l,
        })
    }
}

/// The pitch denoiser with the ablation heads swapped in where a branch is
/// not diffused.
struct VariantEstimator<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    cond: &'a Tensor,
    uv_logits: Option<Vec<f32>>,
}

impl PitchEstimator for VariantEstimator<'_> {
    fn categories(&self) -> usize {
        UV_CATEGORIES
    }

    fn estimate(&self, x_t: &[f32], y_t: &[f32], t: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let v = self.model.cfg.variant;
        let zx;
        let x = if v.f0_diffusion {
            x_t
        } else {
            zx = vec![0.0; x_t.len()];
            &zx
        };
        let zy;
        let y = if v.uv_diffusion {
            y_t
        } else {
            zy = vec![0.0; y_t.len()];
            &zy
        };
        let (mut eps, logits) = self.model.pitch.predict(self.store, x, y, t, self.cond)?;
        if !v.f0_diffusion {
            eps.fill(0.0);
        }
        Ok((eps, self.uv_logits.clone().unwrap_or(logits)))
    }
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &n in &terms[1..] {
        acc = g.add(acc, n)?;
    }
    if terms.len() == 1 {
        return Ok(acc);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Output of [`Model::infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Semitones.
    pub f0: Vec<f32>,
    pub unvoiced: Vec<bool>,
    pub coarse: Tensor,
    pub refined: Option<Tensor>,
    /// Word durations the frames were laid out with.
    pub word_durations: Vec<usize>,
    /// Rounded per-word sums of the predicted note lengths.
    pub predicted_word_durations: Vec<usize>,
    pub note_lengths: Vec<f32>,
}

impl Inference {
    pub fn frames(&self) -> usize {
        self.f0.len()
    }

    /// Refined frames when present, else the coarse ones.
    pub fn spectral(&self) -> &Tensor {
        self.refined.as_ref().unwrap_or(&self.coarse)
    }
}
