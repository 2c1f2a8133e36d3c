//! Frame-level pitch and spectral tracks.

use serde::{Deserialize, Serialize};

use super::phonemes;
use crate::error::{Error, Result};

/// Dimension of the synthetic spectral frames.
pub const SPECTRAL_DIM: usize = 16;

/// Voicing category indices of the one-hot UV encoding.
pub const VOICED: usize = 0;
pub const UNVOICED: usize = 1;
pub const UV_CATEGORIES: usize = 2;

/// Per-frame F0 on the MIDI semitone scale plus one-hot voicing.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f32>,
    pub uv: Vec<[f32; UV_CATEGORIES]>,
}

pub fn one_hot(unvoiced: bool) -> [f32; UV_CATEGORIES] {
    if unvoiced {
        [0.0, 1.0]
    } else {
        [1.0, 0.0]
    }
}

impl PitchTrack {
    pub fn new(f0: Vec<f32>, uv: Vec<[f32; UV_CATEGORIES]>) -> Result<Self> {
        if f0.len() != uv.len() {
            return Err(Error::arg(format!(
                "f0 has {} frames, uv has {}",
                f0.len(),
                uv.len()
            )));
        }
        if uv.iter().any(|u| !matches!(u, [1.0, 0.0] | [0.0, 1.0])) {
            return Err(Error::arg("uv entries must be one-hot"));
        }
        Ok(Self { f0, uv })
    }

    pub fn from_flags(f0: Vec<f32>, unvoiced: &[bool]) -> Result<Self> {
        Self::new(f0, unvoiced.iter().map(|&u| one_hot(u)).collect())
    }

    pub fn n_frames(&self) -> usize {
        self.f0.len()
    }

    pub fn is_voiced(&self, frame: usize) -> bool {
        self.uv[frame][VOICED] == 1.0
    }

    pub fn unvoiced_flags(&self) -> Vec<bool> {
        (0..self.n_frames()).map(|i| !self.is_voiced(i)).collect()
    }
}

/// Corpus F0 statistics used to standardize the diffusion target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Stats {
    pub mean: f64,
    pub std: f64,
}

impl F0Stats {
    pub fn from_tracks<'a>(tracks: impl IntoIterator<Item = &'a PitchTrack>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for t in tracks {
            for &v in &t.f0 {
                n += 1;
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Err(Error::arg("no frames to compute F0 statistics from"));
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt().max(1e-3);
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, f0: &[f32]) -> Vec<f32> {
        f0.iter()
            .map(|&v| ((v as f64 - self.mean) / self.std) as f32)
            .collect()
    }

    pub fn destandardize(&self, z: &[f32]) -> Vec<f32> {
        z.iter()
            .map(|&v| (v as f64 * self.std + self.mean) as f32)
            .collect()
    }
}

/// `n_frames x SPECTRAL_DIM` synthetic spectral envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTrack {
    pub frames: Vec<[f32; SPECTRAL_DIM]>,
}

impl SpectralTrack {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.frames.iter().flatten().copied().collect()
    }

    pub fn from_flat(data: &[f32]) -> Result<Self> {
        if !data.len().is_multiple_of(SPECTRAL_DIM) {
            return Err(Error::arg("spectral data is not a whole number of frames"));
        }
        Ok(Self {
            frames: data
                .chunks_exact(SPECTRAL_DIM)
                .map(|c| c.try_into().expect("chunk"))
                .collect(),
        })
    }
}

/// Fixed per-phoneme envelope.
pub fn phoneme_template(phoneme_id: usize) -> [f32; SPECTRAL_DIM] {
    let p = phoneme_id as f64 + 1.0;
    let mut out = [0.0f32; SPECTRAL_DIM];
    for (d, v) in out.iter_mut().enumerate() {
        let d = d as f64 + 1.0;
        *v = (0.8 * (1.37 * p * d + 0.5 * p).sin() + 0.3 * (0.71 * p + 0.9 * d).cos()) as f32;
    }
    out
}

/// Per-frame envelope: phoneme template plus `sin(k * f0 / 12)` for
/// `k = 1..=4` added to the first four dimensions.
pub fn synth_spectral_target(phoneme_ids: &[usize], f0_semitones: &[f32]) -> Result<SpectralTrack> {
    if phoneme_ids.len() != f0_semitones.len() {
        return Err(Error::arg(format!(
            "{} phoneme frames but {} f0 frames",
            phoneme_ids.len(),
            f0_semitones.len()
        )));
    }
    let mut frames = Vec::with_capacity(phoneme_ids.len());
    for (&p, &f0) in phoneme_ids.iter().zip(f0_semitones) {
        if p >= phonemes::vocab_size() {
            return Err(Error::arg(format!("phoneme id {p} out of range")));
        }
        let mut v = phoneme_template(p);
        for (k, slot) in v.iter_mut().take(4).enumerate() {
            *slot += ((k as f64 + 1.0) * f0 as f64 / 12.0).sin() as f32;
        }
        frames.push(v);
    }
    Ok(SpectralTrack { frames })
}
