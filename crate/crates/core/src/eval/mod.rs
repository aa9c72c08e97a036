//! Desk-scale evaluation: pixel metrics, an extractor-based style distance,
//! the contrastive score grid and the stratified `report.csv`.

mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use rand::seq::SliceRandom;

pub use metrics::{
    contrastive_score_grid, contrastive_scores, l1, scr_distance, scr_distances, ssim, SSIM_SIGMA, SSIM_WINDOW,
};

use crate::error::{Error, Result};
use crate::glyphset::{classify_complexity, CharId, ComplexityLevel, Corpus, FontId, SplitSpec};
use crate::image::{save_contact_sheet, GlyphImage};
use crate::network::GlyphDiffusion;
use crate::rng;
use crate::sample::{sample, GuidanceConfig};
use crate::schedule::ScheduleTable;
use crate::scr::StyleExtractor;

pub const REPORT_FILE: &str = "report.csv";
pub const SPLIT_NAMES: [&str; 3] = ["SFUC", "UFSC", "UFUC"];
/// Pairs per generation batch.
const CHUNK: usize = 16;
/// Rows in each split's score grid.
const GRID_ROWS: usize = 8;

/// One pair to render: content, one-shot reference and ground truth.
pub struct EvalJob<'a> {
    pub font_id: FontId,
    pub char_id: CharId,
    pub content: &'a GlyphImage,
    pub reference: &'a GlyphImage,
    pub target: &'a GlyphImage,
}

/// Anything that renders content glyphs in a reference style.
pub trait Generator {
    /// `chunk` numbers successive calls so stochastic generators can seed them.
    fn generate(&self, jobs: &[EvalJob], chunk: usize) -> Result<Vec<GlyphImage>>;
}

/// Returns the ground truth; the metric upper bound.
pub struct IdentityGenerator;

impl Generator for IdentityGenerator {
    fn generate(&self, jobs: &[EvalJob], _chunk: usize) -> Result<Vec<GlyphImage>> {
        Ok(jobs.iter().map(|j| j.target.clone()).collect())
    }
}

/// Guided sampling from a trained network.
pub struct ModelGenerator<'m> {
    pub model: &'m GlyphDiffusion,
    pub table: &'m ScheduleTable,
    pub guidance: GuidanceConfig,
}

impl Generator for ModelGenerator<'_> {
    fn generate(&self, jobs: &[EvalJob], chunk: usize) -> Result<Vec<GlyphImage>> {
        let dev = Device::Cpu;
        let contents: Vec<&GlyphImage> = jobs.iter().map(|j| j.content).collect();
        let refs: Vec<&GlyphImage> = jobs.iter().map(|j| j.reference).collect();
        let x_c = GlyphImage::stack(&contents, DType::F32, &dev)?;
        let x_s = GlyphImage::stack(&refs, DType::F32, &dev)?;
        let guidance = GuidanceConfig {
            seed: rng::derive_seed(self.guidance.seed, "eval-chunk", chunk as u64),
            ..self.guidance
        };
        GlyphImage::unstack(&sample(self.model, &x_c, &x_s, self.table, &guidance)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub split: &'static str,
    /// `None` for the sample-weighted average row.
    pub complexity: Option<ComplexityLevel>,
    pub n: usize,
    pub ssim: f64,
    pub l1: f64,
    pub scr_dist: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn row(&self, split: &str, complexity: Option<ComplexityLevel>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.split == split && r.complexity == complexity)
    }

    /// `split,complexity,n,ssim,l1,scr_dist`; empty cells have blank metrics.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,complexity,n,ssim,l1,scr_dist\n");
        for r in &self.rows {
            let level = r.complexity.map_or("Average", |c| match c {
                ComplexityLevel::Easy => "Easy",
                ComplexityLevel::Medium => "Medium",
                ComplexityLevel::Hard => "Hard",
            });
            if r.n == 0 {
                let _ = writeln!(s, "{},{level},0,,,", r.split);
            } else {
                let _ = writeln!(s, "{},{level},{},{:.6},{:.6},{:.6}", r.split, r.n, r.ssim, r.l1, r.scr_dist);
            }
        }
        s
    }
}

/// Pairs of a split by name.
pub fn split_pairs(split: &SplitSpec, corpus: &Corpus, name: &str) -> Result<Vec<(FontId, CharId)>> {
    match name {
        "SFUC" => Ok(split.sfuc(corpus)),
        "UFSC" => Ok(split.ufsc(corpus)),
        "UFUC" => Ok(split.ufuc(corpus)),
        "TRAIN" => Ok(split.train_pairs(corpus)),
        other => Err(Error::config(format!("unknown split {other}"))),
    }
}

/// Two distinct seen chars per font, fixed by seed; the second stands in
/// when the target char is the first.
fn references(corpus: &Corpus, split: &SplitSpec, font: FontId, seed: u64) -> Result<[CharId; 2]> {
    let mut seen: Vec<CharId> = split
        .seen_chars
        .iter()
        .copied()
        .filter(|&c| corpus.get(font, c).is_some())
        .collect();
    if seen.len() < 2 {
        return Err(Error::config(format!("font {font} has fewer than two seen chars to use as references")));
    }
    seen.shuffle(&mut rng::stream(seed, "eval-reference", font as u64));
    Ok([seen[0], seen[1]])
}

pub struct EvalSettings<'a> {
    pub splits: &'a [&'static str],
    pub layers: &'a [usize],
    pub seed: u64,
}

/// Generates every pair of each split, scores it against the target and
/// writes `report.csv`, contact sheets and score grids into `out_dir`.
pub fn evaluate(
    generator: &dyn Generator,
    extractor: &StyleExtractor,
    corpus: &Corpus,
    split: &SplitSpec,
    settings: &EvalSettings,
    out_dir: &Path,
) -> Result<MetricReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = MetricReport::default();
    for &name in settings.splits {
        let pairs = split_pairs(split, corpus, name)?;
        if pairs.is_empty() {
            return Err(Error::config(format!("split {name} is empty")));
        }
        let mut jobs = Vec::with_capacity(pairs.len());
        for &(f, c) in &pairs {
            let refs = references(corpus, split, f, settings.seed)?;
            let r = if refs[0] == c { refs[1] } else { refs[0] };
            jobs.push(EvalJob {
                font_id: f,
                char_id: c,
                content: &corpus.source(c)?.image,
                reference: &corpus.glyph(f, r)?.image,
                target: &corpus.glyph(f, c)?.image,
            });
        }
        let mut generated = Vec::with_capacity(jobs.len());
        for (i, chunk) in jobs.chunks(CHUNK).enumerate() {
            let out = generator.generate(chunk, i)?;
            if out.len() != chunk.len() {
                return Err(Error::shape(format!("generator returned {} images for {} jobs", out.len(), chunk.len())));
            }
            generated.extend(out);
        }
        let gen_refs: Vec<&GlyphImage> = generated.iter().collect();
        let targets: Vec<&GlyphImage> = jobs.iter().map(|j| j.target).collect();
        let dists = scr_distances(extractor, &gen_refs, &targets, settings.layers)?;
        let mut cells: [Vec<(f64, f64, f64)>; 3] = Default::default();
        for ((job, g), d) in jobs.iter().zip(&generated).zip(dists) {
            let level = classify_complexity(corpus.stroke_count(job.char_id)?)?;
            let slot = ComplexityLevel::ALL.iter().position(|&l| l == level).expect("listed");
            cells[slot].push((ssim(g, job.target)?, l1(g, job.target)?, d));
        }
        let (mut n_all, mut sums) = (0usize, [0.0f64; 3]);
        for (level, cell) in ComplexityLevel::ALL.iter().zip(&cells) {
            let n = cell.len();
            let mean = |k: usize| cell.iter().map(|v| [v.0, v.1, v.2][k]).sum::<f64>() / n.max(1) as f64;
            let row = ReportRow {
                split: name,
                complexity: Some(*level),
                n,
                ssim: mean(0),
                l1: mean(1),
                scr_dist: mean(2),
            };
            n_all += n;
            for (k, s) in sums.iter_mut().enumerate() {
                *s += n as f64 * [row.ssim, row.l1, row.scr_dist][k];
            }
            report.rows.push(row);
        }
        report.rows.push(ReportRow {
            split: name,
            complexity: None,
            n: n_all,
            ssim: sums[0] / n_all as f64,
            l1: sums[1] / n_all as f64,
            scr_dist: sums[2] / n_all as f64,
        });
        let lower = name.to_lowercase();
        save_contact_sheet(&generated, &out_dir.join(format!("{lower}_generated.png")))?;
        let target_images: Vec<GlyphImage> = targets.iter().map(|&t| t.clone()).collect();
        save_contact_sheet(&target_images, &out_dir.join(format!("{lower}_targets.png")))?;
        let k = GRID_ROWS.min(gen_refs.len());
        contrastive_score_grid(
            extractor,
            &gen_refs[..k],
            &targets[..k],
            settings.layers,
            &out_dir.join(format!("{lower}_scores.png")),
        )?;
    }
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    Ok(report)
}
