use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use super::extractor::StyleExtractor;
use crate::error::{Error, Result};
use crate::glyphset::{CharId, Corpus, FontId};
use crate::image::GlyphImage;
use crate::rng;

/// Style vectors of every glyph, keyed by `(font, char)`; one `Vec<f32>` per layer.
pub fn embed_corpus(
    extractor: &StyleExtractor,
    corpus: &Corpus,
    layers: &[usize],
) -> Result<BTreeMap<(FontId, CharId), Vec<Vec<f32>>>> {
    let glyphs: Vec<_> = corpus.glyphs().collect();
    let mut out = BTreeMap::new();
    for chunk in glyphs.chunks(64) {
        let images: Vec<&GlyphImage> = chunk.iter().map(|g| &g.image).collect();
        let x = GlyphImage::stack(&images, DType::F32, &Device::Cpu)?;
        let vecs: Vec<Vec<Vec<f32>>> = extractor
            .style_vectors(&x, layers)?
            .iter()
            .map(|t| t.to_dtype(DType::F32)?.to_vec2::<f32>())
            .collect::<candle_core::Result<_>>()?;
        for (i, g) in chunk.iter().enumerate() {
            out.insert((g.font_id, g.char_id), vecs.iter().map(|layer| layer[i].clone()).collect());
        }
    }
    Ok(out)
}

/// `Σ_l a^l · b^l`
pub fn layer_score(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (*p as f64) * (*q as f64)).sum::<f64>())
        .sum()
}

/// Fraction of trials where a same-font glyph of another character
/// outscores `k` same-character glyphs from other fonts.
pub fn retrieval_accuracy(
    extractor: &StyleExtractor,
    corpus: &Corpus,
    n_trials: usize,
    k: usize,
    layers: &[usize],
    seed: u64,
) -> Result<f64> {
    let fonts = corpus.fonts();
    if fonts.len() < k + 1 {
        return Err(Error::config(format!(
            "{k} distractors need {} fonts, corpus has {}",
            k + 1,
            fonts.len()
        )));
    }
    if n_trials == 0 {
        return Err(Error::config("retrieval needs at least one trial"));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let vectors = embed_corpus(extractor, corpus, layers)?;
    let chars_of = |f: FontId| -> Vec<CharId> { corpus.chars().into_iter().filter(|&c| corpus.get(f, c).is_some()).collect() };
    let mut hits = 0usize;
    for trial in 0..n_trials {
        let mut r = rng::stream(seed, "retrieval", trial as u64);
        let font = fonts[r.gen_range(0..fonts.len())];
        let chars = chars_of(font);
        if chars.len() < 2 {
            return Err(Error::config(format!("font {font} has fewer than two glyphs")));
        }
        let picked: Vec<CharId> = chars.choose_multiple(&mut r, 2).copied().collect();
        let (a, b) = (picked[0], picked[1]);
        let mut others: Vec<FontId> = fonts.iter().copied().filter(|&f| f != font && corpus.get(f, b).is_some()).collect();
        if others.len() < k {
            return Err(Error::config(format!("char {b} exists in only {} other fonts", others.len())));
        }
        others.shuffle(&mut r);
        let anchor = &vectors[&(font, a)];
        let positive = layer_score(anchor, &vectors[&(font, b)]);
        if others[..k].iter().all(|&f| positive > layer_score(anchor, &vectors[&(f, b)])) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_trials as f64)
}

/// Batched score matrix `[i][j] = Σ_l v_i^l · w_j^l` between two image sets.
pub fn score_matrix(extractor: &StyleExtractor, rows: &Tensor, cols: &Tensor, layers: &[usize]) -> Result<Vec<Vec<f64>>> {
    let a = extractor.style_vectors(rows, layers)?;
    let b = extractor.style_vectors(cols, layers)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in a.iter().zip(&b) {
        let s = x.to_dtype(DType::F64)?.matmul(&y.to_dtype(DType::F64)?.t()?)?;
        total = Some(match total {
            Some(t) => (t + s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one layer").to_vec2::<f64>()?)
}
