//! Glyph corpora: procedural rendering, PNG ingestion, evaluation splits,
//! complexity labels and training-triplet sampling.

mod load;
mod render;
mod sampler;
mod split;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GlyphImage;

pub use load::{load_corpus, LoadOptions};
pub use render::{
    char_shape, font_style, render_glyph, render_synthetic, CharShape, FontStyle, Stroke,
    SyntheticConfig,
};
pub use sampler::{
    augment_positive, augment_with_crop, sample_triplet, CropWindow, TrainTriplet, TripletSampler,
};
pub use split::{make_splits, SplitFractions, SplitSpec};

pub type FontId = u32;
pub type CharId = u32;

pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [32, 64, 96];

#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub font_id: FontId,
    pub char_id: CharId,
    pub stroke_count: u32,
    pub image: GlyphImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComplexityLevel {
    Easy,
    Medium,
    Hard,
}

impl ComplexityLevel {
    pub const ALL: [ComplexityLevel; 3] = [Self::Easy, Self::Medium, Self::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Medium => "medium",
            Self::Hard => "hard",
        }
    }
}

/// Stroke-count buckets: 6–10 easy, 11–20 medium, 21+ hard. Counts below 6
/// are folded into `Easy` so the mapping is total.
pub fn classify_complexity(stroke_count: u32) -> Result<ComplexityLevel> {
    match stroke_count {
        0 => Err(Error::domain("stroke count must be at least 1")),
        1..=10 => Ok(ComplexityLevel::Easy),
        11..=20 => Ok(ComplexityLevel::Medium),
        _ => Ok(ComplexityLevel::Hard),
    }
}

/// An immutable set of glyphs keyed by `(font_id, char_id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    glyphs: BTreeMap<(FontId, CharId), Glyph>,
    resolution: usize,
    source_font_id: FontId,
}

impl Corpus {
    pub fn new(glyphs: Vec<Glyph>, resolution: usize, source_font_id: FontId) -> Result<Self> {
        let mut map = BTreeMap::new();
        for g in glyphs {
            if g.image.dims() != (3, resolution, resolution) {
                return Err(Error::Corpus(format!(
                    "glyph ({}, {}) has shape {:?}, expected 3x{resolution}x{resolution}",
                    g.font_id,
                    g.char_id,
                    g.image.dims()
                )));
            }
            let key = (g.font_id, g.char_id);
            if map.insert(key, g).is_some() {
                return Err(Error::Corpus(format!("duplicate glyph {key:?}")));
            }
        }
        let chars: BTreeSet<CharId> = map.keys().map(|&(_, c)| c).collect();
        let missing: Vec<CharId> = chars
            .iter()
            .copied()
            .filter(|&c| !map.contains_key(&(source_font_id, c)))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Corpus(format!(
                "source font {source_font_id} lacks glyphs for chars {missing:?}"
            )));
        }
        Ok(Self {
            glyphs: map,
            resolution,
            source_font_id,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn source_font_id(&self) -> FontId {
        self.source_font_id
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn get(&self, font_id: FontId, char_id: CharId) -> Option<&Glyph> {
        self.glyphs.get(&(font_id, char_id))
    }

    pub fn glyph(&self, font_id: FontId, char_id: CharId) -> Result<&Glyph> {
        self.get(font_id, char_id)
            .ok_or_else(|| Error::Corpus(format!("no glyph for font {font_id}, char {char_id}")))
    }

    /// The source-font rendering of `char_id`, which always exists.
    pub fn source(&self, char_id: CharId) -> Result<&Glyph> {
        self.glyph(self.source_font_id, char_id)
    }

    pub fn glyphs(&self) -> impl Iterator<Item = &Glyph> {
        self.glyphs.values()
    }

    pub fn fonts(&self) -> Vec<FontId> {
        let set: BTreeSet<FontId> = self.glyphs.keys().map(|&(f, _)| f).collect();
        set.into_iter().collect()
    }

    pub fn chars(&self) -> Vec<CharId> {
        let set: BTreeSet<CharId> = self.glyphs.keys().map(|&(_, c)| c).collect();
        set.into_iter().collect()
    }

    pub fn stroke_count(&self, char_id: CharId) -> Result<u32> {
        self.source(char_id).map(|g| g.stroke_count)
    }

    /// Writes `root/<font_id>/<char_id>.png` plus a `char_id\tstroke_count` manifest.
    pub fn save(&self, root: &Path, manifest: &Path) -> Result<()> {
        for g in self.glyphs.values() {
            let path = root
                .join(g.font_id.to_string())
                .join(format!("{}.png", g.char_id));
            g.image.save_png(&path)?;
        }
        let mut text = String::from("char_id\tstroke_count\n");
        for c in self.chars() {
            text.push_str(&format!("{c}\t{}\n", self.stroke_count(c)?));
        }
        if let Some(parent) = manifest.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
    }
}
