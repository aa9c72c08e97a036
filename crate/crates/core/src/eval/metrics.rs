use std::path::Path;

use candle_core::{DType, Device};

use crate::error::{Error, Result};
use crate::image::{save_gray_png, GlyphImage};
use crate::scr::StyleExtractor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of `[-1, 1]` images.
const RANGE: f64 = 2.0;
const C1: f64 = (0.01 * RANGE) * (0.01 * RANGE);
const C2: f64 = (0.03 * RANGE) * (0.03 * RANGE);

fn same_dims(a: &GlyphImage, b: &GlyphImage, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM over all fully-contained windows, averaged over
/// channels. Images smaller than the window use one window spanning the
/// whole image.
pub fn ssim(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    same_dims(a, b, "ssim")?;
    if a == b {
        return Ok(1.0);
    }
    let (c, h, w) = a.dims();
    let g = gaussian_window();
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let weights: Vec<f64> = if (wh, ww) == (SSIM_WINDOW, SSIM_WINDOW) {
        let g = &g;
        (0..wh).flat_map(|y| g.iter().map(move |gx| g[y] * gx)).collect()
    } else {
        vec![1.0 / (wh * ww) as f64; wh * ww]
    };
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.channel(ch), b.channel(ch));
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..wh {
                    for dx in 0..ww {
                        let k = weights[dy * ww + dx];
                        let i = (y0 + dy) * w + x0 + dx;
                        let (va, vb) = (pa[i] as f64, pb[i] as f64);
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += (2.0 * ma * mb + C1) * (2.0 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

/// Mean absolute difference.
pub fn l1(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    same_dims(a, b, "l1")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(s / a.data().len() as f64)
}

fn style_vectors_f64(extractor: &StyleExtractor, images: &[&GlyphImage], layers: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
    let x = GlyphImage::stack(images, DType::F32, &Device::Cpu)?;
    extractor
        .style_vectors(&x, layers)?
        .iter()
        .map(|v| Ok(v.to_dtype(DType::F64)?.to_vec2::<f64>()?))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_l (1 − v_a^l · v_b^l)` for each pair `(a[i], b[i])`.
pub fn scr_distances(extractor: &StyleExtractor, a: &[&GlyphImage], b: &[&GlyphImage], layers: &[usize]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} images against {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(Vec::new());
    }
    for (x, y) in a.iter().zip(b) {
        same_dims(x, y, "scr_distance")?;
    }
    let va = style_vectors_f64(extractor, a, layers)?;
    let vb = style_vectors_f64(extractor, b, layers)?;
    Ok((0..a.len())
        .map(|i| {
            va.iter()
                .zip(&vb)
                .map(|(la, lb)| (1.0 - dot(&la[i], &lb[i])).max(0.0))
                .sum()
        })
        .collect())
}

pub fn scr_distance(extractor: &StyleExtractor, a: &GlyphImage, b: &GlyphImage, layers: &[usize]) -> Result<f64> {
    Ok(scr_distances(extractor, &[a], &[b], layers)?[0])
}

/// `[i][j] = Σ_l v_gen_i^l · v_cand_j^l`.
pub fn contrastive_scores(
    extractor: &StyleExtractor,
    generated: &[&GlyphImage],
    candidates: &[&GlyphImage],
    layers: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if generated.is_empty() || candidates.is_empty() {
        return Err(Error::config("score grid needs generated and candidate images"));
    }
    let vg = style_vectors_f64(extractor, generated, layers)?;
    let vc = style_vectors_f64(extractor, candidates, layers)?;
    Ok((0..generated.len())
        .map(|i| {
            (0..candidates.len())
                .map(|j| vg.iter().zip(&vc).map(|(lg, lc)| dot(&lg[i], &lc[j])).sum())
                .collect()
        })
        .collect())
}

/// Scores as a gray heat map (darker = larger) with the generated glyphs
/// down the left edge and the candidates along the top.
pub fn contrastive_score_grid(
    extractor: &StyleExtractor,
    generated: &[&GlyphImage],
    candidates: &[&GlyphImage],
    layers: &[usize],
    out_png: &Path,
) -> Result<Vec<Vec<f64>>> {
    let scores = contrastive_scores(extractor, generated, candidates, layers)?;
    let cell = generated[0].height();
    if generated.iter().chain(candidates).any(|g| g.height() != cell || g.width() != cell) {
        return Err(Error::shape("score grid thumbnails must share one square size"));
    }
    let (rows, cols) = (generated.len(), candidates.len());
    let (w, h) = ((cols + 1) * cell, (rows + 1) * cell);
    let mut px = vec![255u8; w * h];
    let mut blit = |im: &GlyphImage, r: usize, c: usize| {
        for (y, line) in im.to_gray_u8().chunks(cell).enumerate() {
            let start = (r * cell + y) * w + c * cell;
            px[start..start + cell].copy_from_slice(line);
        }
    };
    for (j, im) in candidates.iter().enumerate() {
        blit(im, 0, j + 1);
    }
    for (i, im) in generated.iter().enumerate() {
        blit(im, i + 1, 0);
    }
    let flat = scores.iter().flatten();
    let lo = flat.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (i, row) in scores.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - (s - lo) / span)).round() as u8;
            for y in 0..cell {
                let start = ((i + 1) * cell + y) * w + (j + 1) * cell;
                px[start..start + cell].fill(shade);
            }
        }
    }
    save_gray_png(out_png, w, h, &px)?;
    Ok(scores)
}
