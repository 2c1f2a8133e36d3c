//! Score document types, JSON parsing and validation.

use serde::{Deserialize, Serialize};

use super::phonemes;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoteType {
    Regular,
    Rest,
    Slur,
    Grace,
}

impl NoteType {
    pub const ALL: [NoteType; 4] = [
        NoteType::Regular,
        NoteType::Rest,
        NoteType::Slur,
        NoteType::Grace,
    ];

    pub fn id(self) -> usize {
        match self {
            NoteType::Regular => 0,
            NoteType::Rest => 1,
            NoteType::Slur => 2,
            NoteType::Grace => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Note {
    #[serde(rename = "midi")]
    pub midi_pitch: u8,
    pub dur_beats: f64,
    #[serde(rename = "type")]
    pub note_type: NoteType,
}

impl Note {
    pub fn new(midi_pitch: u8, dur_beats: f64, note_type: NoteType) -> Self {
        Self {
            midi_pitch,
            dur_beats,
            note_type,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Word {
    pub text: String,
    pub phonemes: Vec<String>,
    pub notes: Vec<Note>,
    /// Ground-truth sung duration; present in training data only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_duration_frames: Option<u32>,
}

impl Word {
    pub fn is_rest(&self) -> bool {
        self.phonemes.len() == 1 && phonemes::is_silence(&self.phonemes[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Score {
    pub tempo_bpm: f64,
    pub singer_id: u32,
    pub words: Vec<Word>,
}

impl Score {
    pub fn notes(&self) -> impl Iterator<Item = &Note> {
        self.words.iter().flat_map(|w| w.notes.iter())
    }

    pub fn note_count(&self) -> usize {
        self.words.iter().map(|w| w.notes.len()).sum()
    }

    pub fn phoneme_count(&self) -> usize {
        self.words.iter().map(|w| w.phonemes.len()).sum()
    }

    pub fn seconds_per_beat(&self) -> f64 {
        60.0 / self.tempo_bpm
    }

    pub fn gt_durations(&self) -> Option<Vec<usize>> {
        self.words
            .iter()
            .map(|w| w.gt_duration_frames.map(|d| d as usize))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |path: String, msg: &str| Error::Validation(format!("{path}: {msg}"));
        if !(self.tempo_bpm.is_finite() && self.tempo_bpm > 0.0) {
            return Err(invalid("tempo_bpm".into(), "must be positive"));
        }
        if self.words.is_empty() {
            return Err(invalid("words".into(), "a score needs at least one word"));
        }
        for (wi, word) in self.words.iter().enumerate() {
            let wp = format!("words[{wi}]");
            if word.phonemes.is_empty() {
                return Err(invalid(format!("{wp}.phonemes"), "empty phoneme list"));
            }
            for (pi, p) in word.phonemes.iter().enumerate() {
                if phonemes::id_of(p).is_none() {
                    return Err(invalid(
                        format!("{wp}.phonemes[{pi}]"),
                        &format!("unknown phoneme {p:?}"),
                    ));
                }
            }
            if word.notes.is_empty() {
                return Err(invalid(format!("{wp}.notes"), "a word needs at least one note"));
            }
            if word.gt_duration_frames == Some(0) {
                return Err(invalid(format!("{wp}.gt_duration_frames"), "must be at least 1"));
            }
            let silent = word.phonemes.iter().any(|p| phonemes::is_silence(p));
            let has_rest = word.notes.iter().any(|n| n.note_type == NoteType::Rest);
            if (silent || has_rest)
                && !(word.is_rest()
                    && word.notes.len() == 1
                    && word.notes[0].note_type == NoteType::Rest)
                {
                    return Err(invalid(
                        wp,
                        "rest words hold exactly one SP/AP phoneme and one rest note",
                    ));
                }
            for (ni, note) in word.notes.iter().enumerate() {
                let np = format!("{wp}.notes[{ni}]");
                if !(note.dur_beats.is_finite() && note.dur_beats > 0.0) {
                    return Err(invalid(format!("{np}.dur_beats"), "must be positive"));
                }
                if note.midi_pitch > 127 {
                    return Err(invalid(format!("{np}.midi"), "must be in [0, 127]"));
                }
                if (note.note_type == NoteType::Rest) != (note.midi_pitch == 0) {
                    return Err(invalid(np, "rest notes and only rest notes have midi 0"));
                }
                if ni == 0 && note.note_type == NoteType::Slur {
                    return Err(invalid(np, "a slur cannot begin a word"));
                }
                if note.note_type == NoteType::Grace
                    && !matches!(
                        word.notes.get(ni + 1).map(|n| n.note_type),
                        Some(NoteType::Regular | NoteType::Slur)
                    )
                {
                    return Err(invalid(np, "a grace note must precede a pitched note"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parse and validate a score document.
pub fn parse_score(text: &str) -> Result<Score> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let score: Score = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Schema {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    score.validate()?;
    Ok(score)
}
