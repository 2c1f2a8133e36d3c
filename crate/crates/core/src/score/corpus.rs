//! Synthetic singing corpus.
//!
//! Each song is a random score plus the frame-level tracks a singer might
//! produce from it: word durations stretched away from the written beats,
//! portamento between notes, vibrato, jitter and consonant onsets.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::frames::{self, span_bounds, split_proportional, FPS};
use super::model::{Note, NoteType, Score, Word};
use super::phonemes::{self, AP, CONSONANTS, SP, VOWELS};
use super::tracks::{synth_spectral_target, PitchTrack, SpectralTrack};
use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Sung length of a grace note, in beats.
pub const GRACE_SUNG_BEATS: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub songs: usize,
    pub test_songs: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub tempo_min: f64,
    pub tempo_max: f64,
    pub pitch_min: u8,
    pub pitch_max: u8,
    pub singers: u32,
    /// Written note lengths to draw from, in beats.
    pub note_beats: Vec<f64>,
    pub max_notes_per_word: usize,
    pub rest_prob: f64,
    pub breath_prob: f64,
    pub slur_prob: f64,
    pub grace_prob: f64,
    pub consonant_prob: f64,
    /// Log-std of the per-word lognormal stretch.
    pub dur_log_std: f64,
    /// Per-singer tempo habit: singer `s` of `S` stretches every word by
    /// `exp(spread * (2s/(S-1) - 1))`.
    pub singer_dur_spread: f64,
    pub ramp_frames: usize,
    pub vibrato_semitones: f64,
    pub vibrato_hz: f64,
    pub jitter_semitones: f64,
    pub consonant_frames: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            songs: 200,
            test_songs: 20,
            words_min: 3,
            words_max: 5,
            tempo_min: 100.0,
            tempo_max: 140.0,
            pitch_min: 57,
            pitch_max: 72,
            singers: 2,
            note_beats: vec![0.25, 0.5, 0.5, 0.75, 1.0],
            max_notes_per_word: 3,
            rest_prob: 0.15,
            breath_prob: 0.3,
            slur_prob: 0.2,
            grace_prob: 0.1,
            consonant_prob: 0.8,
            dur_log_std: 0.1,
            singer_dur_spread: 0.08,
            ramp_frames: 8,
            vibrato_semitones: 0.3,
            vibrato_hz: 6.0,
            jitter_semitones: 0.05,
            consonant_frames: 6,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.songs == 0 {
            return bad("songs must be positive");
        }
        if self.test_songs >= self.songs {
            return bad("test_songs must leave at least one training song");
        }
        if self.words_min == 0 || self.words_max < self.words_min {
            return bad("need 1 <= words_min <= words_max");
        }
        if !(self.tempo_min > 0.0 && self.tempo_max >= self.tempo_min) {
            return bad("need 0 < tempo_min <= tempo_max");
        }
        if self.pitch_min == 0 || self.pitch_max < self.pitch_min || self.pitch_max > 127 {
            return bad("need 1 <= pitch_min <= pitch_max <= 127");
        }
        if self.singers == 0 {
            return bad("singers must be positive");
        }
        if self.note_beats.is_empty() || self.note_beats.iter().any(|&b| !(b > 0.0)) {
            return bad("note_beats must be non-empty and positive");
        }
        if self.max_notes_per_word == 0 {
            return bad("max_notes_per_word must be positive");
        }
        for (name, p) in [
            ("rest_prob", self.rest_prob),
            ("breath_prob", self.breath_prob),
            ("slur_prob", self.slur_prob),
            ("grace_prob", self.grace_prob),
            ("consonant_prob", self.consonant_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("dur_log_std", self.dur_log_std),
            ("singer_dur_spread", self.singer_dur_spread),
            ("vibrato_semitones", self.vibrato_semitones),
            ("vibrato_hz", self.vibrato_hz),
            ("jitter_semitones", self.jitter_semitones),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// A score with the ground-truth tracks of one rendition.
#[derive(Clone, Debug, PartialEq)]
pub struct Song {
    pub score: Score,
    pub pitch: PitchTrack,
    pub spectral: SpectralTrack,
}

impl Song {
    pub fn n_frames(&self) -> usize {
        self.pitch.n_frames()
    }

    pub fn word_durations(&self) -> Vec<usize> {
        self.score
            .gt_durations()
            .expect("generated songs carry durations")
    }
}

fn random_score(cfg: &CorpusConfig, rng: &mut RngState) -> Score {
    let tempo_bpm = (rng.uniform_range(cfg.tempo_min, cfg.tempo_max) * 4.0).round() / 4.0;
    let singer_id = rng.below(cfg.singers as usize) as u32;
    let n_words = rng.int_inclusive(cfg.words_min, cfg.words_max);
    let mut pitch = rng.int_inclusive(cfg.pitch_min as usize, cfg.pitch_max as usize) as i64;
    let step_pitch = |rng: &mut RngState, p: i64| -> i64 {
        let next = p + rng.int_inclusive(0, 8) as i64 - 4;
        next.clamp(cfg.pitch_min as i64, cfg.pitch_max as i64)
    };
    let mut words = Vec::with_capacity(n_words);
    for wi in 0..n_words {
        // Songs never open with a rest.
        if wi > 0 && rng.uniform() < cfg.rest_prob && !words.last().is_some_and(Word::is_rest) {
            let symbol = if rng.uniform() < cfg.breath_prob { AP } else { SP };
            let beats = cfg.note_beats[rng.below(cfg.note_beats.len())];
            words.push(Word {
                text: String::new(),
                phonemes: vec![symbol.to_string()],
                notes: vec![Note::new(0, beats, NoteType::Rest)],
                gt_duration_frames: None,
            });
            continue;
        }
        let mut phs = Vec::with_capacity(2);
        if rng.uniform() < cfg.consonant_prob {
            phs.push(CONSONANTS[rng.below(CONSONANTS.len())].to_string());
        }
        phs.push(VOWELS[rng.below(VOWELS.len())].to_string());
        let mut notes = Vec::new();
        if rng.uniform() < cfg.grace_prob {
            let grace = step_pitch(rng, pitch);
            notes.push(Note::new(grace as u8, 0.5, NoteType::Grace));
        }
        pitch = step_pitch(rng, pitch);
        let beats = cfg.note_beats[rng.below(cfg.note_beats.len())];
        notes.push(Note::new(pitch as u8, beats.max(0.5), NoteType::Regular));
        while notes.len() < cfg.max_notes_per_word && rng.uniform() < cfg.slur_prob {
            pitch = step_pitch(rng, pitch);
            let beats = cfg.note_beats[rng.below(cfg.note_beats.len())];
            notes.push(Note::new(pitch as u8, beats, NoteType::Slur));
        }
        words.push(Word {
            text: phs.concat(),
            phonemes: phs,
            notes,
            gt_duration_frames: None,
        });
    }
    Score {
        tempo_bpm,
        singer_id,
        words,
    }
}

/// Beats each note is actually sung for: grace notes are cut to
/// [`GRACE_SUNG_BEATS`] and the following note takes the remainder.
pub fn sung_beats(notes: &[Note]) -> Vec<f64> {
    let mut out: Vec<f64> = notes.iter().map(|n| n.dur_beats).collect();
    for i in 0..notes.len() {
        if notes[i].note_type == NoteType::Grace && i + 1 < notes.len() {
            let cut = (notes[i].dur_beats - GRACE_SUNG_BEATS).max(0.0);
            out[i] -= cut;
            out[i + 1] += cut;
        }
    }
    out
}

/// Singer-dependent duration factor.
pub fn singer_factor(cfg: &CorpusConfig, singer_id: u32) -> f64 {
    if cfg.singers <= 1 {
        return 1.0;
    }
    let u = 2.0 * singer_id as f64 / (cfg.singers - 1) as f64 - 1.0;
    (cfg.singer_dur_spread * u).exp()
}

/// Render the tracks of `score`, filling in its ground-truth durations.
pub fn render_song(cfg: &CorpusConfig, mut score: Score, rng: &mut RngState) -> Result<Song> {
    score.validate()?;
    let written: Vec<f64> = score
        .words
        .iter()
        .map(|w| w.notes.iter().map(|n| n.dur_beats).sum())
        .collect();
    let spans = frames::spans_from_beats(&written, score.tempo_bpm, FPS)?;
    let habit = singer_factor(cfg, score.singer_id);
    let durations: Vec<usize> = spans
        .iter()
        .map(|&s| {
            let stretch = (cfg.dur_log_std * rng.normal()).exp() * habit;
            ((s as f64 * stretch).round() as usize).max(2)
        })
        .collect();
    let n_frames: usize = durations.iter().sum();

    let mut pitch_of = vec![0.0f64; n_frames];
    let mut unvoiced = vec![false; n_frames];
    let mut phoneme_of = vec![0usize; n_frames];
    // (onset frame, length, midi, note type) of every sung note.
    let mut sung: Vec<(usize, usize, f64, NoteType)> = Vec::new();

    for (word, &(start, end)) in score.words.iter().zip(&span_bounds(&durations)) {
        let len = end - start;
        let ids: Vec<usize> = word
            .phonemes
            .iter()
            .map(|p| phonemes::id_of(p).expect("validated"))
            .collect();
        if word.is_rest() {
            for t in start..end {
                unvoiced[t] = true;
                phoneme_of[t] = ids[0];
            }
            continue;
        }
        let note_spans = split_proportional(len, &sung_beats(&word.notes));
        for (note, (ns, ne)) in word.notes.iter().zip(span_bounds(&note_spans)) {
            for t in start + ns..start + ne {
                pitch_of[t] = note.midi_pitch as f64;
            }
            if ne > ns {
                sung.push((start + ns, ne - ns, note.midi_pitch as f64, note.note_type));
            }
        }
        // Word-initial consonant: unvoiced, then the remaining phonemes share the rest.
        let mut cursor = start;
        let mut rest_ids = &ids[..];
        if phonemes::is_consonant(&word.phonemes[0]) && ids.len() > 1 {
            let c = cfg.consonant_frames.min(len.saturating_sub(1));
            for t in start..start + c {
                unvoiced[t] = true;
                phoneme_of[t] = ids[0];
            }
            cursor += c;
            rest_ids = &ids[1..];
        }
        let shares = split_proportional(end - cursor, &vec![1.0; rest_ids.len()]);
        for (&id, (a, b)) in rest_ids.iter().zip(span_bounds(&shares)) {
            for t in cursor + a..cursor + b {
                phoneme_of[t] = id;
            }
        }
    }

    // Portamento between adjacent sung notes.
    let mut f0 = pitch_of.clone();
    let ramp = cfg.ramp_frames;
    if ramp > 0 {
        for pair in sung.windows(2) {
            let (a_on, a_len, a_p, _) = pair[0];
            let (b_on, b_len, b_p, _) = pair[1];
            if a_on + a_len != b_on || a_p == b_p {
                continue;
            }
            let half = ramp / 2;
            let lo = b_on.saturating_sub(half.min(a_len / 2));
            let hi = (b_on + (ramp - half).min(b_len / 2)).min(n_frames);
            let width = (hi - lo) as f64;
            for t in lo..hi {
                let u = (t - lo) as f64 + 0.5;
                let w = 0.5 - 0.5 * (PI * u / width).cos();
                f0[t] = a_p + (b_p - a_p) * w;
            }
        }
    }
    for &(onset, len, _, kind) in &sung {
        let amp = if kind == NoteType::Grace {
            0.0
        } else {
            cfg.vibrato_semitones
        };
        for k in 0..len {
            let phase = 2.0 * PI * cfg.vibrato_hz * k as f64 / FPS;
            f0[onset + k] += amp * phase.sin();
        }
    }
    if cfg.jitter_semitones > 0.0 {
        for v in f0.iter_mut() {
            *v += cfg.jitter_semitones * rng.normal();
        }
    }
    interpolate_unvoiced(&mut f0, &unvoiced);

    let f0: Vec<f32> = f0.iter().map(|&v| v as f32).collect();
    let spectral = synth_spectral_target(&phoneme_of, &f0)?;
    let pitch = PitchTrack::from_flags(f0, &unvoiced)?;
    for (w, d) in score.words.iter_mut().zip(&durations) {
        w.gt_duration_frames = Some(*d as u32);
    }
    Ok(Song {
        score,
        pitch,
        spectral,
    })
}

/// Linear interpolation through unvoiced frames; edges hold the nearest
/// voiced value and a fully unvoiced track sits at middle C.
pub fn interpolate_unvoiced(f0: &mut [f64], unvoiced: &[bool]) {
    let voiced: Vec<usize> = (0..f0.len()).filter(|&i| !unvoiced[i]).collect();
    let Some((&first, &last)) = voiced.first().zip(voiced.last()) else {
        f0.iter_mut().for_each(|v| *v = 60.0);
        return;
    };
    for i in 0..first {
        f0[i] = f0[first];
    }
    for i in last + 1..f0.len() {
        f0[i] = f0[last];
    }
    for pair in voiced.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in a + 1..b {
            let w = (i - a) as f64 / (b - a) as f64;
            f0[i] = f0[a] * (1.0 - w) + f0[b] * w;
        }
    }
}

/// Generate `cfg.songs` songs; song `i` draws from substream `i` only.
pub fn generate_corpus(cfg: &CorpusConfig, rng: &RngState) -> Result<Vec<Song>> {
    cfg.validate()?;
    (0..cfg.songs)
        .map(|i| {
            let mut r = rng.substream(i as u64);
            let score = random_score(cfg, &mut r);
            render_song(cfg, score, &mut r)
        })
        .collect()
}

/// Split a generated corpus into (train, test); the last songs are held out.
pub fn split(cfg: &CorpusConfig, songs: Vec<Song>) -> (Vec<Song>, Vec<Song>) {
    let mut train = songs;
    let test = train.split_off(train.len() - cfg.test_songs.min(train.len()));
    (train, test)
}
