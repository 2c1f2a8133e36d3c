//! Objective metrics and the reference baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::score::frames::split_proportional;
use crate::score::{NoteType, Song, SPECTRAL_DIM};

use super::model::ScoreInputs;
use super::train::Checkpoint;

/// `(10 / ln 10) * sqrt(2)`.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Semitones over frames voiced in both tracks; absent when there are none.
    pub f0rmse: Option<f64>,
    pub vde: f64,
    pub mcd_lite: f64,
    pub word_duration_mae_pct: f64,
    pub frames: usize,
    /// Frames dropped when prediction and reference lengths differed.
    pub truncated_frames: usize,
}

/// One predicted track set.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub f0: Vec<f32>,
    pub unvoiced: Vec<bool>,
    /// `[T, dim]`.
    pub spectral: Tensor,
    pub word_durations: Vec<usize>,
}

impl Prediction {
    pub fn from_song(song: &Song) -> Result<Self> {
        Ok(Self {
            f0: song.pitch.f0.clone(),
            unvoiced: song.pitch.unvoiced_flags(),
            spectral: Tensor::new(vec![song.n_frames(), SPECTRAL_DIM], song.spectral.flat())?,
            word_durations: song.word_durations(),
        })
    }
}

/// Running sums behind an [`EvalReport`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricSums {
    voiced_both: usize,
    f0_sq: f64,
    mismatched: usize,
    frames: usize,
    spectral_dist: f64,
    spectral_frames: usize,
    dur_abs: f64,
    dur_total: f64,
    truncated: usize,
}

impl MetricSums {
    pub fn add(&mut self, pred: &Prediction, truth: &Prediction) -> Result<()> {
        for (what, p, t) in [
            ("f0", pred.f0.len(), pred.unvoiced.len()),
            ("reference f0", truth.f0.len(), truth.unvoiced.len()),
        ] {
            if p != t {
                return Err(Error::arg(format!("{what}: {p} f0 frames but {t} uv frames")));
            }
        }
        if pred.spectral.cols() != truth.spectral.cols() {
            return Err(Error::arg("spectral dimensions differ"));
        }
        if pred.word_durations.len() != truth.word_durations.len() {
            return Err(Error::arg(format!(
                "{} predicted word durations for {} words",
                pred.word_durations.len(),
                truth.word_durations.len()
            )));
        }
        let n = pred.f0.len().min(truth.f0.len());
        self.truncated += pred.f0.len().max(truth.f0.len()) - n;
        for i in 0..n {
            let (pu, tu) = (pred.unvoiced[i], truth.unvoiced[i]);
            if pu != tu {
                self.mismatched += 1;
            }
            if !pu && !tu {
                self.voiced_both += 1;
                self.f0_sq += (pred.f0[i] as f64 - truth.f0[i] as f64).powi(2);
            }
        }
        self.frames += n;
        let m = pred.spectral.rows().min(truth.spectral.rows());
        for i in 0..m {
            let d: f64 = pred
                .spectral
                .row(i)
                .iter()
                .zip(truth.spectral.row(i))
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            self.spectral_dist += d.sqrt();
        }
        self.spectral_frames += m;
        for (&p, &t) in pred.word_durations.iter().zip(&truth.word_durations) {
            self.dur_abs += (p as f64 - t as f64).abs();
            self.dur_total += t as f64;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.frames == 0 || self.spectral_frames == 0 || self.dur_total == 0.0 {
            return Err(Error::arg("nothing to evaluate"));
        }
        Ok(EvalReport {
            f0rmse: (self.voiced_both > 0).then(|| (self.f0_sq / self.voiced_both as f64).sqrt()),
            vde: self.mismatched as f64 / self.frames as f64,
            mcd_lite: MCD_SCALE * self.spectral_dist / self.spectral_frames as f64,
            word_duration_mae_pct: 100.0 * self.dur_abs / self.dur_total,
            frames: self.frames,
            truncated_frames: self.truncated,
        })
    }
}

/// Pooled metrics over paired tracks; longer tracks are cut to the shorter.
pub fn evaluate(preds: &[Prediction], truths: &[Prediction]) -> Result<EvalReport> {
    if preds.len() != truths.len() {
        return Err(Error::arg(format!("{} predictions for {} references", preds.len(), truths.len())));
    }
    let mut sums = MetricSums::default();
    for (p, t) in preds.iter().zip(truths) {
        sums.add(p, t)?;
    }
    sums.report()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Lay frames out with the reference word durations rather than the
    /// predicted ones. Duration MAE always uses the predictions.
    pub gt_durations: bool,
    pub refine: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            gt_durations: true,
            refine: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub report: EvalReport,
    /// Same metrics with the coarse decoder output in place of the refined one.
    pub coarse: EvalReport,
}

/// Run inference on every song and score it against the song's own tracks.
pub fn evaluate_checkpoint(ck: &Checkpoint, songs: &[Song], opts: EvalOptions) -> Result<ModelEval> {
    let model = ck.build()?;
    let root = RngState::new(opts.seed);
    let mut fine = MetricSums::default();
    let mut coarse = MetricSums::default();
    for (i, song) in songs.iter().enumerate() {
        let inputs = ScoreInputs::new(&song.score)?;
        let gt = song.word_durations();
        let spans = opts.gt_durations.then_some(gt.as_slice());
        let inf = model.infer(&ck.params, &ck.f0_stats, &inputs, spans, opts.refine, &root.substream(i as u64))?;
        let truth = Prediction::from_song(song)?;
        let mut pred = Prediction {
            f0: inf.f0.clone(),
            unvoiced: inf.unvoiced.clone(),
            spectral: inf.spectral().clone(),
            word_durations: inf.predicted_word_durations.clone(),
        };
        fine.add(&pred, &truth)?;
        pred.spectral = inf.coarse;
        coarse.add(&pred, &truth)?;
    }
    Ok(ModelEval {
        report: fine.report()?,
        coarse: coarse.report()?,
    })
}

/// Reference numbers a trained model has to beat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// VDE of calling every frame voiced.
    pub always_voiced_vde: f64,
    /// F0RMSE of the written note pitches laid over the reference word spans.
    pub score_pitch_f0rmse: Option<f64>,
    /// VDE of the same score track (rests unvoiced, everything else voiced).
    pub score_pitch_vde: f64,
}

/// Written pitch per frame, with each word's reference span split across its
/// notes in proportion to written beats. Rests are unvoiced.
pub fn score_pitch_track(song: &Song) -> (Vec<f32>, Vec<bool>) {
    let mut f0 = Vec::with_capacity(song.n_frames());
    let mut unvoiced = Vec::with_capacity(song.n_frames());
    for (word, span) in song.score.words.iter().zip(song.word_durations()) {
        let beats: Vec<f64> = word.notes.iter().map(|n| n.dur_beats).collect();
        for (note, frames) in word.notes.iter().zip(split_proportional(span, &beats)) {
            let rest = note.note_type == NoteType::Rest;
            f0.extend(std::iter::repeat_n(note.midi_pitch as f32, frames));
            unvoiced.extend(std::iter::repeat_n(rest, frames));
        }
    }
    (f0, unvoiced)
}

pub fn baselines(songs: &[Song]) -> Result<Baselines> {
    let mut voiced = MetricSums::default();
    let mut written = MetricSums::default();
    for song in songs {
        let truth = Prediction::from_song(song)?;
        let (f0, unvoiced) = score_pitch_track(song);
        let all_voiced = Prediction {
            unvoiced: vec![false; truth.f0.len()],
            ..truth.clone()
        };
        voiced.add(&all_voiced, &truth)?;
        written.add(
            &Prediction {
                f0,
                unvoiced,
                ..truth.clone()
            },
            &truth,
        )?;
    }
    let (v, w) = (voiced.report()?, written.report()?);
    Ok(Baselines {
        always_voiced_vde: v.vde,
        score_pitch_f0rmse: w.f0rmse,
        score_pitch_vde: w.vde,
    })
}
