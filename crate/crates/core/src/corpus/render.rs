//! Procedural pen-stroke rendering of text lines.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::charset::VariantPair;
use crate::error::{Error, Result};
use crate::image::{LineImage, BACKGROUND};
use crate::seed;

use super::glyphs::{glyph_edges, glyph_nodes, BASELINE_ROW, GLYPH_COLS};

/// Horizontal size of one font cell at scale 1, in pixels.
pub const CELL_W: f64 = 2.4;
/// Vertical size of one font cell at scale 1, in pixels.
pub const CELL_H: f64 = 3.4;
/// Blank border left and right of the text.
pub const MARGIN: f64 = 6.0;
const BASELINE_Y: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Forward lean in degrees.
    pub slant_deg: f64,
    /// Pen diameter in pixels.
    pub stroke_width: f64,
    /// Per-instance stroke-node displacement (std, pixels).
    pub jitter: f64,
    /// Gap between glyph boxes in pixels.
    pub spacing: f64,
    /// Ink darkness in `[0, 1]`.
    pub contrast: f64,
    /// Glyph size multiplier.
    pub scale: f64,
    /// Writer-specific glyph shape deformation (std, font cells).
    pub distortion: f64,
    /// Seed of the writer's fixed glyph deformations.
    pub shape_seed: u64,
}

impl StyleParams {
    /// Undistorted, noise-free style.
    pub fn plain() -> Self {
        StyleParams {
            slant_deg: 0.0,
            stroke_width: 2.0,
            jitter: 0.0,
            spacing: 2.0,
            contrast: 1.0,
            scale: 1.0,
            distortion: 0.0,
            shape_seed: 0,
        }
    }

    pub fn glyph_width(&self) -> f64 {
        GLYPH_COLS as f64 * CELL_W * self.scale
    }

    pub fn advance(&self) -> f64 {
        self.glyph_width() + self.spacing
    }

    /// Raster width for a line of `n_glyphs`.
    pub fn line_width(&self, n_glyphs: usize) -> usize {
        ((2.0 * MARGIN + n_glyphs as f64 * self.advance()).floor() as usize).max(8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharsetMode {
    Native,
    UnseenStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriterRole {
    /// Contributes pretraining lines.
    Source,
    /// Held out for adaptation experiments.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterProfile {
    pub writer_id: u32,
    pub role: WriterRole,
    pub style: StyleParams,
    pub charset_mode: CharsetMode,
    pub language_seed: u64,
    /// Native letters this writer draws with the variant shape but which are
    /// transcribed natively (normalized transcription).
    #[serde(default)]
    pub shape_variants: Vec<VariantPair>,
    /// Native letters this writer both draws and transcribes as the variant.
    #[serde(default)]
    pub spelling_variants: Vec<VariantPair>,
}

impl WriterProfile {
    pub fn plain(writer_id: u32) -> Self {
        WriterProfile {
            writer_id,
            role: WriterRole::Source,
            style: StyleParams::plain(),
            charset_mode: CharsetMode::Native,
            language_seed: 0,
            shape_variants: Vec::new(),
            spelling_variants: Vec::new(),
        }
    }

    /// Applies the writer's transcription convention to native text.
    pub fn spell(&self, text: &str) -> String {
        text.chars()
            .map(|c| self.spelling_variants.iter().find(|p| p.native == c).map_or(c, |p| p.variant))
            .collect()
    }

    fn shape_of(&self, ch: char) -> char {
        self.shape_variants.iter().find(|p| p.native == ch).map_or(ch, |p| p.variant)
    }
}

struct Pen {
    width: usize,
    height: usize,
    ink: Vec<f32>,
}

impl Pen {
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64) {
        let x0 = (a.0.min(b.0) - radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + radius + 1.0).ceil().max(0.0) as usize).min(self.width);
        let y0 = (a.1.min(b.1) - radius - 1.0).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + radius + 1.0).ceil().max(0.0) as usize).min(self.height);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                let cov = (radius + 0.5 - (cx * cx + cy * cy).sqrt()).clamp(0.0, 1.0) as f32;
                let cell = &mut self.ink[y * self.width + x];
                *cell = cell.max(cov);
            }
        }
    }
}

/// Renders `text` in the hand of `profile`. Deterministic per
/// `(text, profile, seed)`; the width depends only on the glyph count and
/// the style.
pub fn render_line(text: &str, profile: &WriterProfile, height: usize, seed: u64) -> Result<LineImage> {
    let chars: Vec<char> = text.chars().collect();
    let mut shapes = Vec::with_capacity(chars.len());
    for &c in &chars {
        let shape = profile.shape_of(c);
        let nodes = glyph_nodes(shape).ok_or(Error::UnknownCodepoint { ch: c })?;
        shapes.push((shape, nodes));
    }
    let style = &profile.style;
    let width = style.line_width(chars.len());
    let mut pen = Pen { width, height, ink: vec![0.0; width * height] };
    let mut rng = seed::rng(seed, "render", 0);
    let jitter = Normal::new(0.0, style.jitter.max(0.0)).unwrap();
    let baseline = BASELINE_Y * height as f64 / 64.0 + if style.jitter > 0.0 { rng.gen_range(-3.0..=3.0) } else { 0.0 };
    let slant = style.slant_deg.to_radians().tan();
    let (cw, ch) = (CELL_W * style.scale, CELL_H * style.scale);
    let radius = style.stroke_width / 2.0;
    for (i, (shape, nodes)) in shapes.iter().enumerate() {
        let x0 = (MARGIN + i as f64 * style.advance()).round();
        let mut shape_rng = seed::rng(style.shape_seed, "glyph", *shape as u64);
        let deform = Normal::new(0.0, style.distortion.max(0.0)).unwrap();
        let wobble = if style.jitter > 0.0 { jitter.sample(&mut rng) * 0.5 } else { 0.0 };
        let points: Vec<(f64, f64)> = nodes
            .iter()
            .map(|&(c, r)| {
                let (dc, dr) = if style.distortion > 0.0 {
                    (deform.sample(&mut shape_rng), deform.sample(&mut shape_rng))
                } else {
                    (0.0, 0.0)
                };
                let (jx, jy) = if style.jitter > 0.0 { (jitter.sample(&mut rng), jitter.sample(&mut rng)) } else { (0.0, 0.0) };
                let y = baseline + (r as f64 - BASELINE_ROW as f64 + dr) * ch + jy + wobble;
                let x = x0 + (c as f64 + 0.5 + dc) * cw + jx + slant * (baseline - y);
                (x, y)
            })
            .collect();
        let edges = glyph_edges(nodes);
        for (k, p) in points.iter().enumerate() {
            if !edges.iter().any(|&(a, b)| a == k || b == k) {
                pen.segment(*p, *p, radius);
            }
        }
        for (a, b) in edges {
            pen.segment(points[a], points[b], radius);
        }
    }
    let contrast = style.contrast.clamp(0.0, 1.0) as f32;
    let pixels = pen
        .ink
        .iter()
        .map(|&v| (BACKGROUND as f32 - 255.0 * contrast * v).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(LineImage { width, height, pixels })
}
