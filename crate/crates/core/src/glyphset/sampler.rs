use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{CharId, Corpus, FontId, SplitSpec};
use crate::error::{Error, Result};
use crate::image::GlyphImage;

/// One training example: content, one-shot style reference, target and
/// optional same-char/other-font negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTriplet {
    pub source: GlyphImage,
    pub reference: GlyphImage,
    pub target: GlyphImage,
    pub negatives: Vec<GlyphImage>,
    pub font_id: FontId,
    pub char_id: CharId,
    pub reference_char_id: CharId,
    pub negative_font_ids: Vec<FontId>,
}

/// Samples triplets from the training pairs (seen fonts × seen chars) of a split.
#[derive(Debug)]
pub struct TripletSampler<'a> {
    corpus: &'a Corpus,
    pairs: Vec<(FontId, CharId)>,
    chars_by_font: BTreeMap<FontId, Vec<CharId>>,
    fonts_by_char: BTreeMap<CharId, Vec<FontId>>,
}

impl<'a> TripletSampler<'a> {
    pub fn new(corpus: &'a Corpus, split: &SplitSpec) -> Result<Self> {
        let pairs = split.train_pairs(corpus);
        if pairs.is_empty() {
            return Err(Error::Sampling("split has no training pairs".into()));
        }
        let mut chars_by_font: BTreeMap<FontId, Vec<CharId>> = BTreeMap::new();
        let mut fonts_by_char: BTreeMap<CharId, Vec<FontId>> = BTreeMap::new();
        for &(f, c) in &pairs {
            chars_by_font.entry(f).or_default().push(c);
            fonts_by_char.entry(c).or_default().push(f);
        }
        Ok(Self {
            corpus,
            pairs,
            chars_by_font,
            fonts_by_char,
        })
    }

    pub fn pairs(&self) -> &[(FontId, CharId)] {
        &self.pairs
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    /// Builds the triplet for a fixed target pair.
    pub fn triplet_for<R: Rng>(
        &self,
        font_id: FontId,
        char_id: CharId,
        rng: &mut R,
        k_negatives: usize,
    ) -> Result<TrainTriplet> {
        let others: Vec<CharId> = self
            .chars_by_font
            .get(&font_id)
            .map(|cs| cs.iter().copied().filter(|&c| c != char_id).collect())
            .unwrap_or_default();
        let reference_char_id = *others.choose(rng).ok_or_else(|| {
            Error::Sampling(format!("font {font_id} has fewer than 2 training chars"))
        })?;
        let candidates: Vec<FontId> = self.fonts_by_char[&char_id]
            .iter()
            .copied()
            .filter(|&f| f != font_id)
            .collect();
        if candidates.len() < k_negatives {
            return Err(Error::Sampling(format!(
                "char {char_id} has {} other fonts, {k_negatives} negatives requested",
                candidates.len()
            )));
        }
        let negative_font_ids: Vec<FontId> = candidates
            .choose_multiple(rng, k_negatives)
            .copied()
            .collect();
        let negatives = negative_font_ids
            .iter()
            .map(|&f| Ok(self.corpus.glyph(f, char_id)?.image.clone()))
            .collect::<Result<_>>()?;
        Ok(TrainTriplet {
            source: self.corpus.source(char_id)?.image.clone(),
            reference: self.corpus.glyph(font_id, reference_char_id)?.image.clone(),
            target: self.corpus.glyph(font_id, char_id)?.image.clone(),
            negatives,
            font_id,
            char_id,
            reference_char_id,
            negative_font_ids,
        })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, k_negatives: usize) -> Result<TrainTriplet> {
        let &(f, c) = self.pairs.choose(rng).expect("pairs are non-empty");
        self.triplet_for(f, c, rng, k_negatives)
    }
}

pub fn sample_triplet<R: Rng>(
    corpus: &Corpus,
    split: &SplitSpec,
    rng: &mut R,
    k_negatives: usize,
) -> Result<TrainTriplet> {
    TripletSampler::new(corpus, split)?.sample(rng, k_negatives)
}

/// A crop window in pixel units: top-left anchor and retained side lengths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub top: f32,
    pub left: f32,
    pub height: f32,
    pub width: f32,
}

/// Crops the window and resamples it back to the full resolution.
pub fn augment_with_crop(image: &GlyphImage, crop: CropWindow) -> GlyphImage {
    let (c, h, w) = image.dims();
    let sy = crop.height / h as f32;
    let sx = crop.width / w as f32;
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = image.channel(ch);
        for y in 0..h {
            let fy = (crop.top + (y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f32;
            for x in 0..w {
                let fx = (crop.left + (x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                data.push((top * (1.0 - wy) + bot * wy).clamp(-1.0, 1.0));
            }
        }
    }
    GlyphImage::new(c, h, w, data).expect("same shape as input")
}

/// Random crop keeping 80–100% of each side, resized back to full size.
pub fn augment_positive<R: Rng>(image: &GlyphImage, rng: &mut R) -> GlyphImage {
    let (_, h, w) = image.dims();
    let fh = rng.gen_range(0.8..=1.0f32);
    let fw = rng.gen_range(0.8..=1.0f32);
    let height = fh * h as f32;
    let width = fw * w as f32;
    let top = rng.gen_range(0.0..=1.0f32) * (h as f32 - height);
    let left = rng.gen_range(0.0..=1.0f32) * (w as f32 - width);
    augment_with_crop(
        image,
        CropWindow {
            top,
            left,
            height,
            width,
        },
    )
}
