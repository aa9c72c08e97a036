use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use glyphdiff::eval::{evaluate, EvalSettings, ModelGenerator, SPLIT_NAMES};
use glyphdiff::glyphset::{
    load_corpus, make_splits, render_synthetic, Corpus, LoadOptions, SplitFractions, SplitSpec, SyntheticConfig,
};
use glyphdiff::image::png_dimensions;
use glyphdiff::network::GlyphDiffusion;
use glyphdiff::sample::{generate, generate_list, load_schedule, GuidanceConfig, SamplerKind};
use glyphdiff::scr::{pretrain_into, ScrPretrainConfig, StyleExtractor};
use glyphdiff::train::{train, TrainConfig};

const CORPUS_MANIFEST: &str = "manifest.tsv";

#[derive(Parser)]
#[command(name = "glyphdiff", version, about = "One-shot glyph style transfer with a conditional diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural corpus to `<out>/<font>/<char>.png` plus a manifest.
    Render {
        #[arg(long, default_value_t = 10)]
        n_fonts: usize,
        #[arg(long, default_value_t = 20)]
        n_chars: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hold out fonts and chars and write the split file.
    Splits {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 0.2)]
        unseen_fonts: f64,
        #[arg(long, default_value_t = 0.2)]
        unseen_chars: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the style extractor with the contrastive loss.
    PretrainScr {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Split file; its training pairs are used. Default: the whole corpus.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// TOML with pretraining fields; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training phase 1 or 2.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate glyphs from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required_unless_present = "list")]
        content: Option<PathBuf>,
        #[arg(long, required_unless_present = "list")]
        style: Option<PathBuf>,
        /// TSV of `content_path, style_path, out_path`; `--out` becomes the contact sheet.
        #[arg(long, conflicts_with_all = ["content", "style"])]
        list: Option<PathBuf>,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out splits and write `report.csv`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scr: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        splits: PathBuf,
        #[command(flatten)]
        guidance: GuidanceArgs,
        /// Extractor layers for the style distance and score grids.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CorpusArgs {
    /// Directory with `<font>/<char>.png` and `manifest.tsv`.
    #[arg(long)]
    corpus: PathBuf,
    /// Load resolution; defaults to the size of the first PNG found.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct GuidanceArgs {
    #[arg(long, default_value_t = 7.5)]
    scale: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value = "fast")]
    sampler: SamplerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl GuidanceArgs {
    fn config(&self) -> GuidanceConfig {
        GuidanceConfig {
            scale: self.scale,
            steps: self.steps,
            sampler: self.sampler,
            seed: self.seed,
        }
    }
}

fn first_png(root: &Path) -> Result<PathBuf> {
    let mut fonts: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    fonts.sort();
    for dir in fonts {
        let mut pngs: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        pngs.sort();
        if let Some(p) = pngs.into_iter().next() {
            return Ok(p);
        }
    }
    bail!("no glyph PNGs under {}", root.display())
}

fn open_corpus(args: &CorpusArgs) -> Result<Corpus> {
    let resolution = match args.resolution {
        Some(r) => r,
        None => png_dimensions(&first_png(&args.corpus)?)?.0,
    };
    let options = LoadOptions {
        resolution,
        source_font_id: None,
    };
    Ok(load_corpus(&args.corpus, &args.corpus.join(CORPUS_MANIFEST), options)?)
}

fn open_split(path: Option<&Path>, corpus: &Corpus) -> Result<SplitSpec> {
    Ok(match path {
        Some(p) => SplitSpec::load(p)?,
        None => SplitSpec::training_only(corpus),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Render {
            n_fonts,
            n_chars,
            resolution,
            seed,
            out,
        } => {
            let corpus = render_synthetic(&SyntheticConfig {
                n_fonts,
                n_chars,
                resolution,
                seed,
            })?;
            corpus.save(&out, &out.join(CORPUS_MANIFEST))?;
            println!("wrote {} glyphs to {}", corpus.len(), out.display());
        }
        Command::Splits {
            corpus,
            unseen_fonts,
            unseen_chars,
            seed,
            out,
        } => {
            let corpus = open_corpus(&corpus)?;
            let fractions = SplitFractions {
                unseen_font_frac: unseen_fonts,
                unseen_char_frac: unseen_chars,
            };
            let split = make_splits(&corpus, fractions, seed)?;
            split.save(&out)?;
            println!(
                "train {} / SFUC {} / UFSC {} / UFUC {} pairs",
                split.train_pairs(&corpus).len(),
                split.sfuc(&corpus).len(),
                split.ufsc(&corpus).len(),
                split.ufuc(&corpus).len()
            );
        }
        Command::PretrainScr {
            corpus,
            splits,
            config,
            steps,
            seed,
            batch,
            lr,
            negatives,
            out,
        } => {
            let corpus = open_corpus(&corpus)?;
            let split = open_split(splits.as_deref(), &corpus)?;
            let mut cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => ScrPretrainConfig::default(),
            };
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.batch = batch.unwrap_or(cfg.batch);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.negatives = negatives.unwrap_or(cfg.negatives);
            cfg.warmup = cfg.warmup.min(cfg.steps);
            let extractor = StyleExtractor::new(
                cfg.extractor.clone(),
                DType::F32,
                glyphdiff::rng::derive_seed(cfg.seed, "scr-init", 0),
            )?;
            fs::create_dir_all(&out)?;
            let mut csv = fs::File::create(out.join("loss.csv"))?;
            writeln!(csv, "step,loss")?;
            let log = pretrain_into(&extractor, &corpus, &split, &cfg, |s, l| {
                let _ = writeln!(csv, "{s},{l}");
                if (s + 1) % 100 == 0 {
                    eprintln!("step {} loss {l:.4}", s + 1);
                }
            })?;
            extractor.save(&out)?;
            fs::write(out.join("pretrain.toml"), toml::to_string(&cfg)?)?;
            println!("{} steps with {} negatives; saved to {}", cfg.steps, log.negatives, out.display());
        }
        Command::Train {
            phase,
            config,
            corpus,
            splits,
            out,
            resume,
        } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p, phase)?,
                None => TrainConfig::defaults_for(phase)?,
            };
            let corpus = open_corpus(&corpus)?;
            let split = open_split(splits.as_deref(), &corpus)?;
            let steps = cfg.steps;
            train(&cfg, &corpus, &split, &out, resume.as_deref(), |s, r| {
                if (s + 1) % 50 == 0 || s + 1 == steps {
                    eprintln!("step {}/{steps} total {:.4} mse {:.4}", s + 1, r.total, r.mse);
                }
            })?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Sample {
            ckpt,
            content,
            style,
            list,
            guidance,
            out,
        } => {
            let g = guidance.config();
            match (list, content, style) {
                (Some(list), _, _) => {
                    let images = generate_list(&ckpt, &list, &g, &out)?;
                    println!("generated {} glyphs; contact sheet {}", images.len(), out.display());
                }
                (None, Some(c), Some(s)) => {
                    generate(&ckpt, &c, &s, &g, &out)?;
                    println!("wrote {}", out.display());
                }
                _ => bail!("pass --content and --style, or --list"),
            }
        }
        Command::Eval {
            ckpt,
            scr,
            corpus,
            splits,
            guidance,
            layers,
            out,
        } => {
            let corpus = open_corpus(&corpus)?;
            let split = SplitSpec::load(&splits)?;
            let model = GlyphDiffusion::load(&ckpt, DType::F32)?;
            let table = load_schedule(&ckpt)?.build()?;
            let extractor = StyleExtractor::load(&scr, DType::F32, true)?;
            let g = guidance.config();
            g.validate(&table)?;
            let generator = ModelGenerator {
                model: &model,
                table: &table,
                guidance: g,
            };
            let settings = EvalSettings {
                splits: &SPLIT_NAMES,
                layers: &layers,
                seed: g.seed,
            };
            let report = evaluate(&generator, &extractor, &corpus, &split, &settings, &out)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
