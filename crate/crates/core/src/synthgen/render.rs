use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synthgen::glyphs::{script_for, Script};

pub const GLYPH_WIDTH: f64 = 7.0;
pub const GLYPH_HEIGHT: f64 = 14.0;
pub const ADVANCE: f64 = 9.0;
pub const WOBBLE_PERIOD: f64 = 18.0;

pub const SLANT_MAX: f64 = 0.35;
pub const THICKNESS_RANGE: (f64, f64) = (1.0, 3.0);
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const WOBBLE_MAX: f64 = 2.0;
pub const NOISE_MAX: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Canvas {
            height: 24,
            width: 72,
        }
    }
}

/// Writing-style distortion parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub style_id: u32,
    /// Shear angle in radians.
    pub slant: f64,
    pub stroke_thickness: f64,
    pub scale_jitter: f64,
    pub baseline_wobble_amp: f64,
    pub noise_level: f64,
}

impl StyleParams {
    /// Undistorted style: upright, unit scale, no wobble or noise.
    pub fn clean(style_id: u32) -> Self {
        StyleParams {
            style_id,
            slant: 0.0,
            stroke_thickness: 1.5,
            scale_jitter: 1.0,
            baseline_wobble_amp: 0.0,
            noise_level: 0.0,
        }
    }

    /// Deterministic style drawn from `(dataset_seed, style_id)`. `widen`
    /// stretches the wobble and noise ranges (1.0 = nominal ranges).
    pub fn for_style(style_id: u32, dataset_seed: u64, widen: f64) -> Self {
        let mut rng = seed::rng(&[dataset_seed, u64::from(style_id), 0x57f1e]);
        StyleParams {
            style_id,
            slant: rng.random_range(-SLANT_MAX..=SLANT_MAX),
            stroke_thickness: rng.random_range(THICKNESS_RANGE.0..=THICKNESS_RANGE.1),
            scale_jitter: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            baseline_wobble_amp: rng.random_range(0.0..=WOBBLE_MAX * widen),
            noise_level: rng.random_range(0.0..=NOISE_MAX * widen),
        }
    }

    /// Checks every field against the nominal ranges stretched by `widen`.
    pub fn validate(&self, widen: f64) -> Result<()> {
        let ok = self.slant.abs() <= SLANT_MAX
            && (THICKNESS_RANGE.0..=THICKNESS_RANGE.1).contains(&self.stroke_thickness)
            && (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale_jitter)
            && (0.0..=WOBBLE_MAX * widen).contains(&self.baseline_wobble_amp)
            && (0.0..=NOISE_MAX * widen).contains(&self.noise_level);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("style out of range: {self:?}")))
        }
    }
}

/// 8-bit grayscale raster; ink is bright (1.0), background dark (0.0).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        f64::from(self.pixels[row * self.width + col]) / 255.0
    }

    /// Pixel values in `[0, 1]`, row-major.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }

    pub fn l1_distance(&self, other: &GrayImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs() / 255.0)
            .sum()
    }
}

/// Places the glyph strokes of `text` on the canvas, in pixel coordinates.
pub fn layout_word(
    text: &str,
    script: &Script,
    style: &StyleParams,
    canvas: Canvas,
    wobble_phase: f64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let n = text.chars().count();
    if n == 0 {
        return Err(Error::Layout("cannot render an empty word".into()));
    }
    if n as f64 * ADVANCE * SCALE_RANGE.0 > canvas.width as f64
        || GLYPH_HEIGHT * SCALE_RANGE.0 > canvas.height as f64
    {
        return Err(Error::Layout(format!(
            "{n} glyphs do not fit a {}x{} canvas",
            canvas.height, canvas.width
        )));
    }
    let s = style.scale_jitter;
    let shear = style.slant.tan();
    let height = GLYPH_HEIGHT * s;
    let width = (n - 1) as f64 * ADVANCE * s + GLYPH_WIDTH * s;
    let x_origin = (canvas.width as f64 - width) / 2.0 - shear * height / 2.0;
    let baseline = (canvas.height as f64 + height) / 2.0;

    let mut out = Vec::new();
    for (i, ch) in text.chars().enumerate() {
        let glyph = script.glyph(ch).ok_or_else(|| {
            Error::Validation(format!("`{ch}` is not in the `{}` alphabet", script.tag))
        })?;
        let cell_x = x_origin + i as f64 * ADVANCE * s;
        for stroke in &glyph.strokes {
            let mut pts = Vec::new();
            for (k, seg) in stroke.windows(2).enumerate() {
                let (a, b) = (seg[0], seg[1]);
                let span = ((b.0 - a.0) * GLYPH_WIDTH).hypot((b.1 - a.1) * GLYPH_HEIGHT) * s;
                let steps = (span / 1.5).ceil().max(1.0) as usize;
                let first = if k == 0 { 0 } else { 1 };
                for j in first..=steps {
                    let t = j as f64 / steps as f64;
                    let gx = a.0 + (b.0 - a.0) * t;
                    let gy = a.1 + (b.1 - a.1) * t;
                    let rise = (1.0 - gy) * height;
                    let x = cell_x + gx * GLYPH_WIDTH * s + rise * shear;
                    let wobble = style.baseline_wobble_amp
                        * (2.0 * PI * x / WOBBLE_PERIOD + wobble_phase).sin();
                    pts.push((x, baseline - rise + wobble));
                }
            }
            out.push(pts);
        }
    }
    Ok(out)
}

/// Anti-aliased stroke rasterization; coverage falls off linearly over one
/// pixel outside the stroke's half-thickness.
pub fn rasterize(polylines: &[Vec<(f64, f64)>], thickness: f64, canvas: Canvas) -> Vec<f64> {
    let (h, w) = (canvas.height, canvas.width);
    let mut img = vec![0.0f64; h * w];
    let reach = thickness / 2.0 + 0.5;
    for line in polylines {
        for seg in line.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a.0.min(b.0) - reach - 1.0).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + reach + 1.0).ceil().max(0.0) as usize).min(w);
            let y0 = (a.1.min(b.1) - reach - 1.0).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + reach + 1.0).ceil().max(0.0) as usize).min(h);
            for r in y0..y1 {
                for c in x0..x1 {
                    let d = segment_distance((c as f64 + 0.5, r as f64 + 0.5), a, b);
                    let cov = (reach - d).clamp(0.0, 1.0);
                    let px = &mut img[r * w + c];
                    if cov > *px {
                        *px = cov;
                    }
                }
            }
        }
    }
    img
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - (a.0 + t * dx)).hypot(p.1 - (a.1 + t * dy))
}

/// Renders one word image. Output is a pure function of the arguments.
pub fn render_word(
    text: &str,
    language: &str,
    style: &StyleParams,
    canvas: Canvas,
    rng_seed: u64,
) -> Result<GrayImage> {
    let script = script_for(language)?;
    let mut rng = seed::rng(&[rng_seed, 0x7e4d]);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let strokes = layout_word(text, script, style, canvas, phase)?;
    let mut img = rasterize(&strokes, style.stroke_thickness, canvas);
    if style.noise_level > 0.0 {
        let normal = Normal::new(0.0, style.noise_level)
            .map_err(|e| Error::Validation(format!("noise level: {e}")))?;
        for px in &mut img {
            *px += normal.sample(&mut rng);
        }
    }
    GrayImage::from_unit(canvas.height, canvas.width, &img)
}
