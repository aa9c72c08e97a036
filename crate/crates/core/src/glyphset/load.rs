use std::collections::BTreeMap;
use std::path::Path;

use super::{CharId, Corpus, FontId, Glyph, SUPPORTED_RESOLUTIONS};
use crate::error::{Error, Result};
use crate::image::GlyphImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub resolution: usize,
    /// Defaults to the smallest font id found under the root.
    pub source_font_id: Option<FontId>,
}

fn parse_manifest(path: &Path) -> Result<BTreeMap<CharId, u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "char_id\tstroke_count" {
        return Err(Error::Corpus(format!(
            "{}: expected header `char_id<TAB>stroke_count`, found {header:?}",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Corpus(format!("{}:{}: malformed row {line:?}", path.display(), i + 2));
        let (c, s) = line.split_once('\t').ok_or_else(bad)?;
        let c: CharId = c.trim().parse().map_err(|_| bad())?;
        let s: u32 = s.trim().parse().map_err(|_| bad())?;
        if s == 0 {
            return Err(bad());
        }
        out.insert(c, s);
    }
    Ok(out)
}

/// Reads `root/<font_id>/<char_id>.png` glyphs with a stroke-count manifest.
pub fn load_corpus(root: &Path, manifest: &Path, options: LoadOptions) -> Result<Corpus> {
    if !SUPPORTED_RESOLUTIONS.contains(&options.resolution) {
        return Err(Error::config(format!(
            "resolution {} not in {SUPPORTED_RESOLUTIONS:?}",
            options.resolution
        )));
    }
    let strokes = parse_manifest(manifest)?;
    let mut glyphs = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut font_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Ok(font_id) = name.parse::<FontId>() {
            if entry.path().is_dir() {
                font_dirs.push((font_id, entry.path()));
            }
        }
    }
    font_dirs.sort();
    for (font_id, dir) in &font_dirs {
        let mut files = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if let Ok(char_id) = stem.parse::<CharId>() {
                files.push((char_id, path));
            }
        }
        files.sort();
        for (char_id, path) in files {
            let stroke_count = *strokes.get(&char_id).ok_or_else(|| {
                Error::Corpus(format!("manifest has no stroke count for char {char_id}"))
            })?;
            glyphs.push(Glyph {
                font_id: *font_id,
                char_id,
                stroke_count,
                image: GlyphImage::load_png(&path, options.resolution)?,
            });
        }
    }
    let source = match options.source_font_id {
        Some(f) => f,
        None => font_dirs
            .first()
            .map(|(f, _)| *f)
            .ok_or_else(|| Error::Corpus(format!("no font directories under {}", root.display())))?,
    };
    Corpus::new(glyphs, options.resolution, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphset::{render_synthetic, SyntheticConfig};
    use crate::image::save_gray_png;

    fn write_manifest(dir: &Path, rows: &[(u32, u32)]) -> std::path::PathBuf {
        let mut text = String::from("char_id\tstroke_count\n");
        for (c, s) in rows {
            text.push_str(&format!("{c}\t{s}\n"));
        }
        let p = dir.join("manifest.tsv");
        std::fs::write(&p, text).unwrap();
        p
    }

    fn opts(res: usize) -> LoadOptions {
        LoadOptions { resolution: res, source_font_id: None }
    }

    #[test]
    fn white_black_and_mid_gray_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("glyphs");
        save_gray_png(&root.join("0/0.png"), 96, 96, &vec![255; 96 * 96]).unwrap();
        save_gray_png(&root.join("0/1.png"), 96, 96, &vec![0; 96 * 96]).unwrap();
        save_gray_png(&root.join("0/2.png"), 96, 96, &vec![128; 96 * 96]).unwrap();
        let manifest = write_manifest(dir.path(), &[(0, 6), (1, 7), (2, 8)]);
        let corpus = load_corpus(&root, &manifest, opts(96)).unwrap();
        assert!(corpus.glyph(0, 0).unwrap().image.data().iter().all(|&v| v == 1.0));
        assert!(corpus.glyph(0, 1).unwrap().image.data().iter().all(|&v| v == -1.0));
        let mid = &corpus.glyph(0, 2).unwrap().image;
        assert!(mid.data().iter().all(|&v| (v - 0.003_921_6).abs() < 1e-6));
    }

    #[test]
    fn missing_stroke_count_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("glyphs");
        save_gray_png(&root.join("0/0.png"), 32, 32, &vec![255; 32 * 32]).unwrap();
        save_gray_png(&root.join("0/3.png"), 32, 32, &vec![255; 32 * 32]).unwrap();
        let manifest = write_manifest(dir.path(), &[(0, 6)]);
        let err = load_corpus(&root, &manifest, opts(32)).unwrap_err();
        assert!(err.to_string().contains("char 3"), "{err}");
    }

    #[test]
    fn missing_source_glyph_lists_offenders() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("glyphs");
        save_gray_png(&root.join("0/0.png"), 32, 32, &vec![255; 32 * 32]).unwrap();
        save_gray_png(&root.join("1/0.png"), 32, 32, &vec![255; 32 * 32]).unwrap();
        save_gray_png(&root.join("1/4.png"), 32, 32, &vec![255; 32 * 32]).unwrap();
        let manifest = write_manifest(dir.path(), &[(0, 6), (4, 9)]);
        let err = load_corpus(&root, &manifest, opts(32)).unwrap_err();
        assert!(matches!(err, Error::Corpus(_)));
        assert!(err.to_string().contains("[4]"), "{err}");
    }

    #[test]
    fn unreadable_png_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("glyphs");
        std::fs::create_dir_all(root.join("0")).unwrap();
        std::fs::write(root.join("0/0.png"), b"not a png").unwrap();
        let manifest = write_manifest(dir.path(), &[(0, 6)]);
        let err = load_corpus(&root, &manifest, opts(32)).unwrap_err();
        assert!(err.to_string().contains("0.png"), "{err}");
    }

    #[test]
    fn save_then_load_is_within_quantization() {
        let corpus = render_synthetic(&SyntheticConfig {
            n_fonts: 3,
            n_chars: 4,
            resolution: 32,
            seed: 3,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("glyphs");
        let manifest = dir.path().join("manifest.tsv");
        corpus.save(&root, &manifest).unwrap();
        let back = load_corpus(&root, &manifest, opts(32)).unwrap();
        assert_eq!(back.len(), corpus.len());
        for g in corpus.glyphs() {
            let h = back.glyph(g.font_id, g.char_id).unwrap();
            assert_eq!(h.stroke_count, g.stroke_count);
            for (a, b) in g.image.data().iter().zip(h.image.data()) {
                assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }
}
