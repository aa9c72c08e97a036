//! Inference: guided noise mixing, the ancestral and fast samplers, and
//! PNG generation from a checkpoint.

mod guidance;
mod samplers;

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

pub use guidance::{cfg_noise, CountingPredictor, NoisePredictor};
pub use samplers::{
    ancestral_from, ancestral_sample, fast_sample, initial_noise, lambda_uniform_times, sample,
    solve_ode, GuidanceConfig, SamplerKind,
};

use crate::error::{Error, Result};
use crate::image::{png_dimensions, save_contact_sheet, GlyphImage};
use crate::network::GlyphDiffusion;
use crate::schedule::{ScheduleConfig, ScheduleTable};

pub const SCHEDULE_FILE: &str = "schedule.toml";

pub fn save_schedule(cfg: &ScheduleConfig, dir: &Path) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))?;
    let path = dir.join(SCHEDULE_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Schedule stored next to a checkpoint; the default when absent.
pub fn load_schedule(dir: &Path) -> Result<ScheduleConfig> {
    let path = dir.join(SCHEDULE_FILE);
    if !path.exists() {
        return Ok(ScheduleConfig::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// A content/reference pair and where to write its sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationJob {
    pub content: PathBuf,
    pub style: PathBuf,
    pub out: PathBuf,
}

/// Reads `content_path\tstyle_path\tout_path` rows; a header row with those
/// names is skipped. Relative paths resolve against the list's directory.
pub fn read_job_list(path: &Path) -> Result<Vec<GenerationJob>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut jobs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with("content_path")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [c, s, o] = cols[..] else {
            return Err(Error::config(format!(
                "{} line {}: expected 3 tab-separated columns",
                path.display(),
                i + 1
            )));
        };
        jobs.push(GenerationJob {
            content: base.join(c),
            style: base.join(s),
            out: base.join(o),
        });
    }
    if jobs.is_empty() {
        return Err(Error::config(format!("{} lists no jobs", path.display())));
    }
    Ok(jobs)
}

fn write_metadata(image_path: &Path, checkpoint: &Path, guidance: &GuidanceConfig, table: &ScheduleTable) -> Result<()> {
    let steps = match guidance.sampler {
        SamplerKind::Ancestral => table.len(),
        SamplerKind::Fast => guidance.steps,
    };
    let text = format!(
        "checkpoint={}\nsampler={}\nscale={}\nsteps={}\nseed={}\n",
        checkpoint.display(),
        guidance.sampler,
        guidance.scale,
        steps,
        guidance.seed
    );
    let path = image_path.with_extension("txt");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn load_square(path: &Path, resolution: Option<usize>) -> Result<GlyphImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let res = match resolution {
        Some(r) => r,
        None => {
            let (w, h) = png_dimensions(path)?;
            if w != h {
                return Err(Error::shape(format!("{} is {w}x{h}, expected a square glyph", path.display())));
            }
            w
        }
    };
    GlyphImage::load_png(path, res)
}

/// Samples every job in one batch, writes each PNG with a metadata file,
/// and returns the generated images.
pub fn generate_jobs(
    checkpoint: &Path,
    jobs: &[GenerationJob],
    guidance: &GuidanceConfig,
) -> Result<Vec<GlyphImage>> {
    let model = GlyphDiffusion::load(checkpoint, DType::F32)?;
    let table = load_schedule(checkpoint)?.build()?;
    guidance.validate(&table)?;
    let first = jobs.first().ok_or_else(|| Error::config("no generation jobs"))?;
    let res = png_dimensions(&first.content)?.0;
    let mut contents = Vec::new();
    let mut styles = Vec::new();
    for job in jobs {
        contents.push(load_square(&job.content, Some(res))?);
        styles.push(load_square(&job.style, Some(res))?);
    }
    let stack = |v: &[GlyphImage]| GlyphImage::stack(&v.iter().collect::<Vec<_>>(), DType::F32, &Device::Cpu);
    let (x_c, x_s) = (stack(&contents)?, stack(&styles)?);
    let out = sample(&model, &x_c, &x_s, &table, guidance)?;
    let images = GlyphImage::unstack(&out)?;
    for (job, im) in jobs.iter().zip(&images) {
        im.save_png(&job.out)?;
        write_metadata(&job.out, checkpoint, guidance, &table)?;
    }
    Ok(images)
}

/// Single-pair generation; the image size follows the content PNG.
pub fn generate(
    checkpoint: &Path,
    content: &Path,
    style: &Path,
    guidance: &GuidanceConfig,
    out: &Path,
) -> Result<GlyphImage> {
    load_square(content, None)?;
    let job = GenerationJob {
        content: content.to_path_buf(),
        style: style.to_path_buf(),
        out: out.to_path_buf(),
    };
    Ok(generate_jobs(checkpoint, &[job], guidance)?.remove(0))
}

/// Batch generation from a job list plus a contact sheet of all outputs.
pub fn generate_list(
    checkpoint: &Path,
    list: &Path,
    guidance: &GuidanceConfig,
    sheet: &Path,
) -> Result<Vec<GlyphImage>> {
    let jobs = read_job_list(list)?;
    let images = generate_jobs(checkpoint, &jobs, guidance)?;
    save_contact_sheet(&images, sheet)?;
    let table = load_schedule(checkpoint)?.build()?;
    write_metadata(sheet, checkpoint, guidance, &table)?;
    Ok(images)
}

/// Images as a `B×3×H×W` tensor, for callers holding in-memory glyphs.
pub fn batch_tensor(images: &[&GlyphImage], dtype: DType) -> Result<Tensor> {
    GlyphImage::stack(images, dtype, &Device::Cpu)
}
