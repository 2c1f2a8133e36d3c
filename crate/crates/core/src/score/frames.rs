//! Beat to frame conversion.

use crate::error::{Error, Result};

/// Frames per second: 24 kHz audio with a hop of 128 samples.
pub const FPS: f64 = 24000.0 / 128.0;

/// Round half up.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Frame count of a single note starting at beat 0.
pub fn beats_to_frames(dur_beats: f64, tempo_bpm: f64, fps: f64) -> Result<usize> {
    Ok(spans_from_beats(&[dur_beats], tempo_bpm, fps)?[0])
}

/// Frame spans of consecutive notes by cumulative rounding:
/// `round(end_n * fps) - round(start_n * fps)`, so totals never drift.
pub fn spans_from_beats(durs_beats: &[f64], tempo_bpm: f64, fps: f64) -> Result<Vec<usize>> {
    if !(tempo_bpm.is_finite() && tempo_bpm > 0.0) {
        return Err(Error::arg(format!("tempo must be positive, got {tempo_bpm}")));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::arg(format!("fps must be positive, got {fps}")));
    }
    let spb = 60.0 / tempo_bpm;
    let mut cum = 0.0;
    let mut prev = 0i64;
    let mut spans = Vec::with_capacity(durs_beats.len());
    for &d in durs_beats {
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::arg(format!("duration must be positive, got {d}")));
        }
        cum += d;
        let end = round_half_up(cum * spb * fps);
        spans.push((end - prev) as usize);
        prev = end;
    }
    Ok(spans)
}

/// Split `total` frames proportionally to `weights` with cumulative rounding.
pub fn split_proportional(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let mut cum = 0.0;
    let mut prev = 0i64;
    weights
        .iter()
        .map(|&w| {
            cum += w;
            let end = round_half_up(cum / sum * total as f64).min(total as i64);
            let span = (end - prev).max(0) as usize;
            prev = end;
            span
        })
        .collect()
}

/// `[start, end)` offsets of consecutive spans.
pub fn span_bounds(spans: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    spans
        .iter()
        .map(|&s| {
            let b = (start, start + s);
            start += s;
            b
        })
        .collect()
}
