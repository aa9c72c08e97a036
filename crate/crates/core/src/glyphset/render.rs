//! Hermetic pseudo-glyph renderer. Each char id owns a fixed set of stroke
//! primitives; each font id owns a style transform applied to every char.

use std::f32::consts::PI;

use rand::Rng;

use super::{Corpus, Glyph, SUPPORTED_RESOLUTIONS};
use crate::error::{Error, Result};
use crate::image::GlyphImage;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_fonts: usize,
    pub n_chars: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Stroke primitive in the normalized glyph box `[-1, 1]²` (y grows downward).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stroke {
    Line {
        from: [f32; 2],
        to: [f32; 2],
    },
    Arc {
        center: [f32; 2],
        radius: f32,
        start: f32,
        sweep: f32,
    },
}

impl Stroke {
    fn polyline(&self) -> Vec<[f32; 2]> {
        match *self {
            Stroke::Line { from, to } => vec![from, to],
            Stroke::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let n = 12;
                (0..=n)
                    .map(|i| {
                        let a = start + sweep * i as f32 / n as f32;
                        [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharShape {
    pub strokes: Vec<Stroke>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FontStyle {
    /// Stroke width in pixels at 32×32; scaled linearly with resolution.
    pub stroke_width: f32,
    /// Horizontal shear angle in radians.
    pub slant: f32,
    /// Glyph scale relative to the canvas.
    pub scale: f32,
    /// Darkness of fully covered pixels, in `(0, 1]`.
    pub ink: f32,
}

impl FontStyle {
    /// Maps a normalized glyph point to pixel coordinates.
    pub fn to_pixel(&self, p: [f32; 2], resolution: usize) -> [f32; 2] {
        let half = resolution as f32 / 2.0;
        let u = p[0] - self.slant.tan() * p[1];
        [
            half + self.scale * u * half * CANVAS_FILL,
            half + self.scale * p[1] * half * CANVAS_FILL,
        ]
    }

    /// Inverse of [`FontStyle::to_pixel`].
    pub fn from_pixel(&self, q: [f32; 2], resolution: usize) -> [f32; 2] {
        let half = resolution as f32 / 2.0;
        let u = (q[0] - half) / (self.scale * half * CANVAS_FILL);
        let v = (q[1] - half) / (self.scale * half * CANVAS_FILL);
        [u + self.slant.tan() * v, v]
    }
}

const CANVAS_FILL: f32 = 0.8;

pub fn char_shape(seed: u64, char_id: u32) -> CharShape {
    let mut rng = rng::stream(seed, "char", char_id as u64);
    let count = rng.gen_range(4..=28);
    let strokes = (0..count)
        .map(|_| {
            if rng.gen_bool(0.7) {
                let from = [rng.gen_range(-0.9..0.9f32), rng.gen_range(-0.9..0.9f32)];
                // Mostly horizontal or vertical strokes with some jitter.
                let base = if rng.gen_bool(0.5) { 0.0 } else { PI / 2.0 };
                let angle = base + rng.gen_range(-0.35..0.35f32);
                let len = rng.gen_range(0.3..1.2f32);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let to = [
                    (from[0] + sign * len * angle.cos()).clamp(-0.95, 0.95),
                    (from[1] + sign * len * angle.sin()).clamp(-0.95, 0.95),
                ];
                Stroke::Line { from, to }
            } else {
                Stroke::Arc {
                    center: [rng.gen_range(-0.5..0.5f32), rng.gen_range(-0.5..0.5f32)],
                    radius: rng.gen_range(0.2..0.5f32),
                    start: rng.gen_range(0.0..2.0 * PI),
                    sweep: rng.gen_range(PI / 3.0..PI),
                }
            }
        })
        .collect();
    CharShape { strokes }
}

pub fn font_style(seed: u64, font_id: u32) -> FontStyle {
    let mut rng = rng::stream(seed, "font", font_id as u64);
    FontStyle {
        stroke_width: rng.gen_range(1.0..=4.0f32),
        slant: rng.gen_range(-0.3..=0.3f32),
        scale: rng.gen_range(0.7..=1.0f32),
        ink: rng.gen_range(0.6..=1.0f32),
    }
}

fn segment_distance(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

/// Rasterizes a char shape in a font style with distance-based anti-aliasing.
pub fn render_glyph(shape: &CharShape, style: &FontStyle, resolution: usize) -> GlyphImage {
    let segments: Vec<([f32; 2], [f32; 2])> = shape
        .strokes
        .iter()
        .flat_map(|s| {
            let pts: Vec<[f32; 2]> = s
                .polyline()
                .into_iter()
                .map(|p| style.to_pixel(p, resolution))
                .collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let half_width = 0.5 * style.stroke_width * resolution as f32 / 32.0;
    let mut plane = vec![1.0f32; resolution * resolution];
    for y in 0..resolution {
        for x in 0..resolution {
            let p = [x as f32 + 0.5, y as f32 + 0.5];
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f32::INFINITY, f32::min);
            let coverage = (half_width + 0.5 - d).clamp(0.0, 1.0);
            plane[y * resolution + x] = 1.0 - 2.0 * style.ink * coverage;
        }
    }
    GlyphImage::from_gray(resolution, resolution, &plane).expect("plane sized by construction")
}

/// Renders `n_fonts × n_chars` glyphs; font 0 is the source font.
pub fn render_synthetic(config: &SyntheticConfig) -> Result<Corpus> {
    if !SUPPORTED_RESOLUTIONS.contains(&config.resolution) {
        return Err(Error::config(format!(
            "resolution {} not in {SUPPORTED_RESOLUTIONS:?}",
            config.resolution
        )));
    }
    if config.n_fonts < 2 || config.n_chars < 2 {
        return Err(Error::config("need at least 2 fonts and 2 chars"));
    }
    let shapes: Vec<CharShape> = (0..config.n_chars as u32)
        .map(|c| char_shape(config.seed, c))
        .collect();
    let mut glyphs = Vec::with_capacity(config.n_fonts * config.n_chars);
    for f in 0..config.n_fonts as u32 {
        let style = font_style(config.seed, f);
        for (c, shape) in shapes.iter().enumerate() {
            glyphs.push(Glyph {
                font_id: f,
                char_id: c as u32,
                stroke_count: shape.strokes.len() as u32,
                image: render_glyph(shape, &style, config.resolution),
            });
        }
    }
    Corpus::new(glyphs, config.resolution, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_fonts: 4,
            n_chars: 10,
            resolution: 32,
            seed: 7,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(render_synthetic(&cfg()).unwrap(), render_synthetic(&cfg()).unwrap());
    }

    #[test]
    fn glyphs_stay_in_range_with_background() {
        let corpus = render_synthetic(&cfg()).unwrap();
        for g in corpus.glyphs() {
            assert!(g.image.min_value() >= -1.0);
            assert_eq!(g.image.max_value(), 1.0);
            assert!(g.image.min_value() < 0.0, "glyph has ink");
            assert_eq!(g.image.channel(0), g.image.channel(1));
            assert_eq!(g.image.channel(0), g.image.channel(2));
            assert!((4..=28).contains(&g.stroke_count));
        }
    }

    #[test]
    fn invalid_resolution_is_a_config_error() {
        let mut c = cfg();
        c.resolution = 48;
        assert!(matches!(render_synthetic(&c), Err(Error::Config(_))));
    }

    fn ink_mask_in_canonical_frame(img: &GlyphImage, style: &FontStyle, res: usize) -> Vec<bool> {
        // Sample the rendered mask at the pixel each canonical location maps to.
        let canonical = FontStyle {
            slant: 0.0,
            scale: 1.0,
            ..*style
        };
        let plane = img.channel(0);
        let mut mask = vec![false; res * res];
        for y in 0..res {
            for x in 0..res {
                let p = canonical.from_pixel([x as f32 + 0.5, y as f32 + 0.5], res);
                let q = style.to_pixel(p, res);
                let (qx, qy) = (q[0].floor() as isize, q[1].floor() as isize);
                if qx >= 0 && qy >= 0 && (qx as usize) < res && (qy as usize) < res {
                    mask[y * res + x] = plane[qy as usize * res + qx as usize] < 0.0;
                }
            }
        }
        mask
    }

    #[test]
    fn fonts_differ_only_by_the_style_transform() {
        let res = 96;
        for c in 0..5 {
            let shape = char_shape(11, c);
            let a = FontStyle { stroke_width: 3.0, slant: -0.25, scale: 0.75, ink: 0.7 };
            let b = FontStyle { stroke_width: 3.0, slant: 0.2, scale: 0.95, ink: 1.0 };
            let ma = ink_mask_in_canonical_frame(&render_glyph(&shape, &a, res), &a, res);
            let mb = ink_mask_in_canonical_frame(&render_glyph(&shape, &b, res), &b, res);
            let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
            let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count();
            let iou = inter as f64 / union as f64;
            assert!(iou > 0.8, "char {c}: IoU {iou}");
        }
    }
}
