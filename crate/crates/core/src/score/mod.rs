//! Word-level music scores, frame timing and the synthetic corpus.

pub mod corpus;
pub mod frames;
pub mod model;
pub mod phonemes;
pub mod store;
pub mod tracks;

pub use corpus::{generate_corpus, render_song, CorpusConfig, Song};
pub use frames::{beats_to_frames, spans_from_beats, FPS};
pub use model::{parse_score, Note, NoteType, Score, Word};
pub use tracks::{synth_spectral_target, F0Stats, PitchTrack, SpectralTrack, SPECTRAL_DIM, UV_CATEGORIES};
