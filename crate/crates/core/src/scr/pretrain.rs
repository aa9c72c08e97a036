use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::extractor::{ScrConfig, StyleExtractor};
use super::loss::{style_contrastive_loss, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::glyphset::{augment_positive, CharId, Corpus, FontId, SplitSpec};
use crate::image::GlyphImage;
use crate::rng;
use crate::train::{AdamW, AdamWConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScrPretrainConfig {
    /// Requested negatives per anchor; capped at `n_fonts − 2`.
    pub negatives: usize,
    pub lr: f64,
    pub warmup: usize,
    pub steps: usize,
    /// Anchors (fonts) per step; all drawn from one character.
    pub batch: usize,
    pub tau: f64,
    pub seed: u64,
    pub extractor: ScrConfig,
}

impl Default for ScrPretrainConfig {
    fn default() -> Self {
        Self {
            negatives: 48,
            lr: 1e-4,
            warmup: 1000,
            steps: 10_000,
            batch: 16,
            tau: DEFAULT_TAU,
            seed: 0,
            extractor: ScrConfig::default(),
        }
    }
}

/// Losses per step and the negative count actually used.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLog {
    pub negatives: usize,
    pub losses: Vec<f64>,
}

/// Fonts available for each character among the training pairs.
fn fonts_by_char(corpus: &Corpus, split: &SplitSpec) -> BTreeMap<CharId, Vec<FontId>> {
    let mut map: BTreeMap<CharId, Vec<FontId>> = BTreeMap::new();
    for (f, c) in split.train_pairs(corpus) {
        map.entry(c).or_default().push(f);
    }
    map
}

/// Negative count after scaling to the corpus: `min(K, n_fonts − 2)`.
pub fn scaled_negatives(requested: usize, n_fonts: usize) -> Result<usize> {
    let k = requested.min(n_fonts.saturating_sub(2));
    if k == 0 {
        return Err(Error::config(format!(
            "{n_fonts} training fonts leave no room for contrastive negatives"
        )));
    }
    Ok(k)
}

/// Trains a fresh extractor with the layer-summed contrastive loss over all
/// its layers. Each step draws one character; anchors are clean glyphs of
/// several fonts, positives their random crops, and negatives the same
/// character in other fonts (sharing one forward pass with the anchors).
pub fn pretrain_scr(corpus: &Corpus, split: &SplitSpec, cfg: &ScrPretrainConfig) -> Result<(StyleExtractor, PretrainLog)> {
    let extractor = StyleExtractor::new(cfg.extractor.clone(), DType::F32, rng::derive_seed(cfg.seed, "scr-init", 0))?;
    let log = pretrain_into(&extractor, corpus, split, cfg, |_, _| {})?;
    Ok((extractor, log))
}

/// Same as [`pretrain_scr`] on a caller-built extractor; `on_step` sees
/// each step index and loss.
pub fn pretrain_into(
    extractor: &StyleExtractor,
    corpus: &Corpus,
    split: &SplitSpec,
    cfg: &ScrPretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainLog> {
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::config("pretraining needs batch ≥ 1 and steps ≥ 1"));
    }
    let by_char = fonts_by_char(corpus, split);
    let n_fonts = split.seen_fonts.len();
    let k = scaled_negatives(cfg.negatives, n_fonts)?;
    let chars: Vec<CharId> = by_char
        .iter()
        .filter(|(_, fonts)| fonts.len() > k)
        .map(|(&c, _)| c)
        .collect();
    if chars.is_empty() {
        return Err(Error::config(format!("no character is available in {} fonts", k + 1)));
    }
    let layers: Vec<usize> = (0..extractor.num_layers()).collect();
    let mut opt = AdamW::new(extractor.store().vars(), AdamWConfig::default())?;
    let schedule = LrSchedule::WarmupLinear {
        lr: cfg.lr,
        warmup: cfg.warmup.min(cfg.steps),
        total: cfg.steps,
    };
    let dev = Device::Cpu;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, "scr-step", step as u64);
        let c = chars[r.gen_range(0..chars.len())];
        let pool = &by_char[&c];
        let glyphs: Vec<&GlyphImage> = pool.iter().map(|&f| corpus.glyph(f, c).map(|g| &g.image)).collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut r);
        let anchors: Vec<usize> = order.into_iter().take(cfg.batch).collect();
        let positives: Vec<GlyphImage> = anchors.iter().map(|&i| augment_positive(glyphs[i], &mut r)).collect();
        let mut neg_idx = Vec::with_capacity(anchors.len() * k);
        for &i in &anchors {
            let mut others: Vec<u32> = (0..pool.len() as u32).filter(|&j| j as usize != i).collect();
            others.shuffle(&mut r);
            neg_idx.extend_from_slice(&others[..k]);
        }
        let mut batch: Vec<&GlyphImage> = glyphs.clone();
        batch.extend(positives.iter());
        let x = GlyphImage::stack(&batch, DType::F32, &dev)?;
        let vectors = extractor.style_vectors(&x, &layers)?;
        let (n, b) = (pool.len(), anchors.len());
        let anchor_idx = Tensor::new(anchors.iter().map(|&i| i as u32).collect::<Vec<_>>(), &dev)?;
        let neg_idx = Tensor::new(neg_idx, &dev)?;
        let mut va = Vec::new();
        let mut vp = Vec::new();
        let mut vn = Vec::new();
        for v in &vectors {
            let clean = v.narrow(0, 0, n)?;
            let d = clean.dims()[1];
            va.push(clean.index_select(&anchor_idx, 0)?);
            vp.push(v.narrow(0, n, b)?);
            vn.push(clean.index_select(&neg_idx, 0)?.reshape((b, k, d))?);
        }
        let loss = style_contrastive_loss(&va, &vp, &vn, cfg.tau)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                t: Vec::new(),
                detail: format!("style contrastive loss {value}"),
            });
        }
        let grads = loss.backward()?;
        opt.step(&grads, schedule.at(step))?;
        on_step(step, value);
        losses.push(value);
    }
    Ok(PretrainLog { negatives: k, losses })
}
