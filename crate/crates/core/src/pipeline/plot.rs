//! SVG rendering of pitch and spectral tracks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::model::Inference;

const WIDTH: f64 = 800.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const GAP: f64 = 50.0;
const BOTTOM: f64 = 45.0;
const HEAT_H: f64 = 180.0;
const PITCH_H: f64 = 220.0;

/// Any subset of the tracks; present tracks must agree on frame count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotTracks {
    pub f0: Option<Vec<f32>>,
    pub unvoiced: Option<Vec<bool>>,
    /// `[T, dim]`.
    pub spectral: Option<Tensor>,
    pub title: Option<String>,
}

impl PlotTracks {
    pub fn from_inference(inf: &Inference) -> Self {
        Self {
            f0: Some(inf.f0.clone()),
            unvoiced: Some(inf.unvoiced.clone()),
            spectral: Some(inf.spectral().clone()),
            title: None,
        }
    }

    fn frames(&self) -> Result<usize> {
        let lens: Vec<(&str, usize)> = [
            self.f0.as_ref().map(|f| ("f0", f.len())),
            self.unvoiced.as_ref().map(|u| ("uv", u.len())),
            self.spectral.as_ref().map(|s| ("spectral", s.rows())),
        ]
        .into_iter()
        .flatten()
        .collect();
        let Some(&(_, n)) = lens.first() else {
            return Err(Error::arg("nothing to plot"));
        };
        if let Some((what, m)) = lens.iter().find(|(_, m)| *m != n) {
            return Err(Error::arg(format!("{what} has {m} frames, expected {n}")));
        }
        if n == 0 {
            return Err(Error::arg("nothing to plot: zero frames"));
        }
        if self.f0.as_ref().is_some_and(|f| f.iter().any(|v| !v.is_finite()))
            || self.spectral.as_ref().is_some_and(|s| s.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::arg("tracks must be finite"));
        }
        Ok(n)
    }
}

/// Maximal runs of unvoiced frames as half-open `[start, end)` spans.
pub fn unvoiced_spans(unvoiced: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &u) in unvoiced.iter().enumerate() {
        match (u, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, unvoiced.len()));
    }
    out
}

struct Panel {
    top: f64,
    height: f64,
    frames: usize,
}

impl Panel {
    fn plot_w(&self) -> f64 {
        WIDTH - LEFT - RIGHT
    }

    fn x(&self, frame: f64) -> f64 {
        LEFT + frame / self.frames as f64 * self.plot_w()
    }

    fn frame_axis(&self, svg: &mut String) {
        let y = self.top + self.height;
        let step = tick_step(self.frames as f64, 8.0);
        let mut f = 0.0;
        while f <= self.frames as f64 + 1e-9 {
            let x = self.x(f);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{y:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
                y + 4.0,
                y + 16.0,
                f as usize
            );
            f += step;
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">frame</text>"#,
            LEFT + self.plot_w() / 2.0,
            y + 32.0
        );
    }

    fn frame(&self, svg: &mut String) {
        let _ = writeln!(
            svg,
            r#"<rect x="{LEFT:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            self.top,
            self.plot_w(),
            self.height
        );
    }
}

fn tick_step(range: f64, max_ticks: f64) -> f64 {
    let raw = (range / max_ticks).max(1e-9);
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag)
        .max(1.0)
}

/// Blue to yellow through green.
fn color(u: f64) -> String {
    let stops = [(0.27, 0.0, 0.33), (0.13, 0.57, 0.55), (0.99, 0.91, 0.14)];
    let u = u.clamp(0.0, 1.0) * 2.0;
    let i = (u.floor() as usize).min(1);
    let w = u - i as f64;
    let mix = |a: f64, b: f64| ((a + (b - a) * w) * 255.0).round() as u8;
    let (a, b) = (stops[i], stops[i + 1]);
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn heatmap(svg: &mut String, p: &Panel, spec: &Tensor) {
    let (rows, dims) = (spec.rows(), spec.cols());
    let (lo, hi) = spec
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell_h = p.height / dims as f64;
    svg.push_str("<g class=\"spectral\" shape-rendering=\"crispEdges\">\n");
    for t in 0..rows {
        let (x0, x1) = (p.x(t as f64), p.x(t as f64 + 1.0));
        for (d, &v) in spec.row(t).iter().enumerate() {
            // dimension 0 at the bottom
            let y = p.top + p.height - (d + 1) as f64 * cell_h;
            let _ = writeln!(
                svg,
                r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{cell_h:.2}" fill="{}"/>"#,
                x1 - x0,
                color((v as f64 - lo) / span)
            );
        }
    }
    svg.push_str("</g>\n");
    let step = tick_step(dims as f64, 4.0) as usize;
    for d in (0..dims).step_by(step.max(1)) {
        let y = p.top + p.height - (d as f64 + 0.5) * cell_h;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{d}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">spectral dim</text>"#,
        p.top + p.height / 2.0,
        p.top + p.height / 2.0
    );
    p.frame(svg);
    p.frame_axis(svg);
}

fn pitch_panel(svg: &mut String, p: &Panel, f0: Option<&[f32]>, unvoiced: Option<&[bool]>) {
    let (lo, hi) = match f0 {
        Some(f) => {
            let (lo, hi) = f
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
            (lo.floor() - 1.0, hi.ceil() + 1.0)
        }
        None => (0.0, 1.0),
    };
    let y = |v: f64| p.top + p.height - (v - lo) / (hi - lo) * p.height;
    if let Some(uv) = unvoiced {
        svg.push_str("<g class=\"uv\">\n");
        for (a, b) in unvoiced_spans(uv) {
            let (x0, x1) = (p.x(a as f64), p.x(b as f64));
            let _ = writeln!(
                svg,
                r##"<rect data-frames="{a}-{b}" x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#d9d9d9"/>"##,
                p.top,
                x1 - x0,
                p.height
            );
        }
        svg.push_str("</g>\n");
    }
    if let Some(f) = f0 {
        let step = tick_step(hi - lo, 6.0);
        let mut v = (lo / step).ceil() * step;
        while v <= hi + 1e-9 {
            let yy = y(v);
            let _ = writeln!(
                svg,
                r#"<line x1="{:.2}" y1="{yy:.2}" x2="{LEFT:.2}" y2="{yy:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{v}</text>"#,
                LEFT - 4.0,
                LEFT - 6.0,
                yy + 4.0
            );
            v += step;
        }
        let pts: Vec<String> = f
            .iter()
            .enumerate()
            .map(|(t, &v)| format!("{:.2},{:.2}", p.x(t as f64 + 0.5), y(v as f64)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline class="f0" fill="none" stroke="#c0392b" stroke-width="1.5" points="{}"/>"##,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">semitones</text>"#,
            p.top + p.height / 2.0,
            p.top + p.height / 2.0
        );
    }
    p.frame(svg);
    p.frame_axis(svg);
}

/// Render the present tracks: a spectral heatmap on top, then the F0
/// contour over grey bands marking unvoiced frames.
pub fn plot(tracks: &PlotTracks) -> Result<String> {
    let frames = tracks.frames()?;
    let has_pitch = tracks.f0.is_some() || tracks.unvoiced.is_some();
    let mut height = TOP + BOTTOM;
    if tracks.spectral.is_some() {
        height += HEAT_H;
    }
    if has_pitch {
        height += PITCH_H;
    }
    if tracks.spectral.is_some() && has_pitch {
        height += GAP;
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(title) = &tracks.title {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="18" font-size="13" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
    }
    let mut top = TOP;
    if let Some(spec) = &tracks.spectral {
        heatmap(&mut svg, &Panel { top, height: HEAT_H, frames }, spec);
        top += HEAT_H + GAP;
    }
    if has_pitch {
        let panel = Panel {
            top,
            height: PITCH_H,
            frames,
        };
        pitch_panel(&mut svg, &panel, tracks.f0.as_deref(), tracks.unvoiced.as_deref());
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
