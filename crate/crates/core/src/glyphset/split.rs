use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{CharId, Corpus, FontId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub unseen_font_frac: f64,
    pub unseen_char_frac: f64,
}

/// Disjoint seen/unseen font and char sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub seen_fonts: BTreeSet<FontId>,
    pub unseen_fonts: BTreeSet<FontId>,
    pub seen_chars: BTreeSet<CharId>,
    pub unseen_chars: BTreeSet<CharId>,
}

fn held_out_count(total: usize, frac: f64, what: &str) -> Result<usize> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::config(format!("{what} fraction {frac} not in (0, 1)")));
    }
    Ok(((frac * total as f64).floor() as usize).max(1))
}

/// Deterministically partitions fonts and chars; the source font is always seen.
pub fn make_splits(corpus: &Corpus, fractions: SplitFractions, seed: u64) -> Result<SplitSpec> {
    let fonts = corpus.fonts();
    let chars = corpus.chars();
    let n_unseen_fonts = held_out_count(fonts.len(), fractions.unseen_font_frac, "unseen font")?;
    let n_unseen_chars = held_out_count(chars.len(), fractions.unseen_char_frac, "unseen char")?;

    let mut candidates: Vec<FontId> = fonts
        .iter()
        .copied()
        .filter(|&f| f != corpus.source_font_id())
        .collect();
    if n_unseen_fonts > candidates.len() {
        return Err(Error::config(format!(
            "cannot hold out {n_unseen_fonts} of {} fonts: no seen fonts would remain",
            fonts.len()
        )));
    }
    if n_unseen_chars >= chars.len() {
        return Err(Error::config(format!(
            "cannot hold out {n_unseen_chars} of {} chars: no seen chars would remain",
            chars.len()
        )));
    }
    let mut font_rng = rng::stream(seed, "split-fonts", 0);
    candidates.shuffle(&mut font_rng);
    let unseen_fonts: BTreeSet<FontId> = candidates[..n_unseen_fonts].iter().copied().collect();
    let seen_fonts = fonts
        .iter()
        .copied()
        .filter(|f| !unseen_fonts.contains(f))
        .collect();

    let mut shuffled = chars.clone();
    let mut char_rng = rng::stream(seed, "split-chars", 0);
    shuffled.shuffle(&mut char_rng);
    let unseen_chars: BTreeSet<CharId> = shuffled[..n_unseen_chars].iter().copied().collect();
    let seen_chars = chars
        .iter()
        .copied()
        .filter(|c| !unseen_chars.contains(c))
        .collect();

    Ok(SplitSpec {
        seen_fonts,
        unseen_fonts,
        seen_chars,
        unseen_chars,
    })
}

fn product(corpus: &Corpus, fonts: &BTreeSet<FontId>, chars: &BTreeSet<CharId>) -> Vec<(FontId, CharId)> {
    fonts
        .iter()
        .flat_map(|&f| chars.iter().map(move |&c| (f, c)))
        .filter(|&(f, c)| corpus.get(f, c).is_some())
        .collect()
}

impl SplitSpec {
    /// A split that holds nothing out: every font and char is seen.
    pub fn training_only(corpus: &Corpus) -> Self {
        Self {
            seen_fonts: corpus.fonts().into_iter().collect(),
            unseen_fonts: BTreeSet::new(),
            seen_chars: corpus.chars().into_iter().collect(),
            unseen_chars: BTreeSet::new(),
        }
    }

    pub fn train_pairs(&self, corpus: &Corpus) -> Vec<(FontId, CharId)> {
        product(corpus, &self.seen_fonts, &self.seen_chars)
    }

    pub fn sfuc(&self, corpus: &Corpus) -> Vec<(FontId, CharId)> {
        product(corpus, &self.seen_fonts, &self.unseen_chars)
    }

    pub fn ufsc(&self, corpus: &Corpus) -> Vec<(FontId, CharId)> {
        product(corpus, &self.unseen_fonts, &self.seen_chars)
    }

    pub fn ufuc(&self, corpus: &Corpus) -> Vec<(FontId, CharId)> {
        product(corpus, &self.unseen_fonts, &self.unseen_chars)
    }

    /// Writes one `set\tid` row per member.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("set\tid\n");
        for (name, set) in [
            ("seen_font", &self.seen_fonts),
            ("unseen_font", &self.unseen_fonts),
            ("seen_char", &self.seen_chars),
            ("unseen_char", &self.unseen_chars),
        ] {
            for id in set {
                text.push_str(&format!("{name}\t{id}\n"));
            }
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = SplitSpec {
            seen_fonts: BTreeSet::new(),
            unseen_fonts: BTreeSet::new(),
            seen_chars: BTreeSet::new(),
            unseen_chars: BTreeSet::new(),
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::config(format!("{}:{}: malformed split row", path.display(), i + 1));
            let (name, id) = line.split_once('\t').ok_or_else(bad)?;
            let id: u32 = id.trim().parse().map_err(|_| bad())?;
            let set = match name {
                "seen_font" => &mut spec.seen_fonts,
                "unseen_font" => &mut spec.unseen_fonts,
                "seen_char" => &mut spec.seen_chars,
                "unseen_char" => &mut spec.unseen_chars,
                _ => return Err(bad()),
            };
            set.insert(id);
        }
        if !spec.seen_fonts.is_disjoint(&spec.unseen_fonts)
            || !spec.seen_chars.is_disjoint(&spec.unseen_chars)
        {
            return Err(Error::config(format!("{}: overlapping split sets", path.display())));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphset::{render_synthetic, SyntheticConfig};

    fn corpus(n_fonts: usize, n_chars: usize) -> Corpus {
        render_synthetic(&SyntheticConfig { n_fonts, n_chars, resolution: 32, seed: 1 }).unwrap()
    }

    fn fr(f: f64, c: f64) -> SplitFractions {
        SplitFractions { unseen_font_frac: f, unseen_char_frac: c }
    }

    #[test]
    fn floor_rule_with_minimum_one() {
        let c = corpus(10, 10);
        let s = make_splits(&c, fr(0.2, 0.3), 5).unwrap();
        assert_eq!(s.unseen_fonts.len(), 2);
        assert_eq!(s.unseen_chars.len(), 3);
        let s = make_splits(&c, fr(0.01, 0.01), 5).unwrap();
        assert_eq!(s.unseen_fonts.len(), 1);
        assert_eq!(s.unseen_chars.len(), 1);
        assert!(s.seen_fonts.contains(&c.source_font_id()));
    }

    #[test]
    fn identical_seeds_identical_splits() {
        let c = corpus(10, 12);
        assert_eq!(make_splits(&c, fr(0.3, 0.3), 9).unwrap(), make_splits(&c, fr(0.3, 0.3), 9).unwrap());
    }

    #[test]
    fn evaluation_pairs_are_disjoint_from_training() {
        let c = corpus(8, 12);
        let s = make_splits(&c, fr(0.3, 0.25), 2).unwrap();
        let train: BTreeSet<_> = s.train_pairs(&c).into_iter().collect();
        let eval: Vec<_> = [s.sfuc(&c), s.ufsc(&c), s.ufuc(&c)].concat();
        let eval_set: BTreeSet<_> = eval.iter().copied().collect();
        assert_eq!(eval.len(), eval_set.len());
        assert!(train.is_disjoint(&eval_set));
        assert_eq!(train.len() + eval_set.len(), c.len());
    }

    #[test]
    fn empty_sets_are_config_errors() {
        let c = corpus(3, 4);
        assert!(matches!(make_splits(&c, fr(0.0, 0.5), 0), Err(Error::Config(_))));
        assert!(matches!(make_splits(&c, fr(0.5, 1.0), 0), Err(Error::Config(_))));
        let s = make_splits(&c, fr(0.99, 0.99), 0).unwrap();
        assert_eq!(s.seen_fonts.len(), 1);
        assert_eq!(s.seen_chars.len(), 1);

        let img = crate::image::GlyphImage::white(32);
        let glyphs = (0..3)
            .map(|f| crate::glyphset::Glyph { font_id: f, char_id: 0, stroke_count: 6, image: img.clone() })
            .collect();
        let single_char = Corpus::new(glyphs, 32, 0).unwrap();
        assert!(matches!(make_splits(&single_char, fr(0.3, 0.5), 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_file_round_trip() {
        let c = corpus(6, 8);
        let s = make_splits(&c, fr(0.3, 0.3), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.tsv");
        s.save(&p).unwrap();
        assert_eq!(SplitSpec::load(&p).unwrap(), s);
    }
}
