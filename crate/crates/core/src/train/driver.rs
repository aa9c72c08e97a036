use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::losses::{condition_dropout, scalar, step_losses, ContrastTargets, LossReport, LossWeights, StepOutputs};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::glyphset::{augment_positive, Corpus, SplitSpec, TripletSampler};
use crate::image::GlyphImage;
use crate::network::GlyphDiffusion;
use crate::rng;
use crate::sample::{load_schedule, save_schedule};
use crate::schedule::{forward_diffuse_batch, ScheduleTable};
use crate::scr::{ScrConfig, StyleExtractor};

pub const LOSS_CSV: &str = "loss.csv";
pub const STATE_FILE: &str = "state.toml";
pub const TRAIN_CONFIG_FILE: &str = "train.toml";
const OPT_MANIFEST: &str = "optimizer.txt";
const OPT_BLOB: &str = "optimizer.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TrainState {
    phase: u8,
    step: usize,
    seed: u64,
}

/// One assembled minibatch.
struct Batch {
    source: Tensor,
    reference: Tensor,
    target: Tensor,
    ts: Vec<usize>,
    eps: Tensor,
    contrast: Option<(Tensor, Tensor)>,
}

/// Owns the model, optimizer and frozen extractor for one phase.
pub struct Trainer<'a> {
    config: TrainConfig,
    model: GlyphDiffusion,
    extractor: StyleExtractor,
    optimizer: AdamW,
    table: ScheduleTable,
    sampler: TripletSampler<'a>,
    negatives: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh (or warm-started) trainer at step 0.
    pub fn new(config: TrainConfig, corpus: &'a Corpus, split: &SplitSpec) -> Result<Self> {
        config.validate()?;
        let model = match &config.init_checkpoint {
            Some(dir) => {
                let m = GlyphDiffusion::load(dir, DType::F32)?;
                if m.config() != &config.model {
                    return Err(Error::config(format!(
                        "init checkpoint {} holds a different model config",
                        dir.display()
                    )));
                }
                m
            }
            None => GlyphDiffusion::new(config.model.clone(), DType::F32, rng::derive_seed(config.seed, "model-init", 0))?,
        };
        let extractor = match &config.scr_checkpoint {
            Some(dir) => StyleExtractor::load(dir, DType::F32, true)?,
            None => StyleExtractor::new_frozen(ScrConfig::default(), DType::F32, rng::derive_seed(config.seed, "cp-trunk", 0))?,
        };
        let layers_ok = config
            .cp_layers
            .iter()
            .chain(&config.sc_layers)
            .all(|&l| l < extractor.num_layers());
        if !layers_ok || config.cp_layers.is_empty() {
            return Err(Error::config(format!(
                "cp_layers {:?} / sc_layers {:?} invalid for a {}-layer extractor",
                config.cp_layers,
                config.sc_layers,
                extractor.num_layers()
            )));
        }
        let sampler = TripletSampler::new(corpus, split)?;
        let negatives = if config.phase == 2 {
            scaled_negatives(&sampler, config.negatives)?
        } else {
            0
        };
        let optimizer = AdamW::new(model.store().vars(), config.optimizer)?;
        let table = config.schedule.build()?;
        Ok(Self {
            config,
            model,
            extractor,
            optimizer,
            table,
            sampler,
            negatives,
            step: 0,
        })
    }

    /// Restores a trainer from a checkpoint directory written by [`Trainer::save`].
    pub fn resume(config: TrainConfig, corpus: &'a Corpus, split: &SplitSpec, dir: &Path) -> Result<Self> {
        let state_path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: TrainState = toml::from_str(&text).map_err(|e| Error::Checkpoint {
            path: state_path.clone(),
            msg: e.to_string(),
        })?;
        if state.phase != config.phase || state.seed != config.seed {
            return Err(Error::Checkpoint {
                path: state_path,
                msg: format!(
                    "checkpoint is phase {} seed {}, config is phase {} seed {}",
                    state.phase, state.seed, config.phase, config.seed
                ),
            });
        }
        if state.step > config.steps {
            return Err(Error::Checkpoint {
                path: state_path,
                msg: format!("checkpoint step {} is past the configured {} steps", state.step, config.steps),
            });
        }
        if load_schedule(dir)? != config.schedule {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                msg: "stored schedule differs from the config".into(),
            });
        }
        let mut t = Self::new(TrainConfig { init_checkpoint: Some(dir.to_path_buf()), ..config.clone() }, corpus, split)?;
        t.config = config;
        t.optimizer.load(&dir.join(OPT_MANIFEST), &dir.join(OPT_BLOB), state.step)?;
        t.step = state.step;
        Ok(t)
    }

    pub fn model(&self) -> &GlyphDiffusion {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Negatives per sample after capping by the corpus.
    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cp: self.config.lambda_cp,
            offset: self.config.lambda_off,
            sc: self.config.lambda_sc,
        }
    }

    /// Data, timesteps, noise and dropout come from one stream per step;
    /// contrastive targets from a second, so both phases see the same batch.
    fn assemble(&self, step: usize) -> Result<Batch> {
        let cfg = &self.config;
        let mut r = rng::stream(cfg.seed, "train-batch", step as u64);
        let mut rc = rng::stream(cfg.seed, "train-contrast", step as u64);
        let (mut src, mut refs, mut tgt) = (Vec::new(), Vec::new(), Vec::new());
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        let mut ts = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let trip = self.sampler.sample(&mut r, 0)?;
            let (c, s) = condition_dropout(&trip.source, &trip.reference, cfg.dropout, &mut r)?;
            ts.push(r.gen_range(0..self.table.len()));
            if self.config.phase == 2 {
                let with_neg = self.sampler.triplet_for(trip.font_id, trip.char_id, &mut rc, self.negatives)?;
                pos.push(augment_positive(&trip.target, &mut rc));
                neg.extend(with_neg.negatives);
            }
            src.push(c);
            refs.push(s);
            tgt.push(trip.target);
        }
        let dev = Device::Cpu;
        let stack = |v: &[GlyphImage]| GlyphImage::stack(&v.iter().collect::<Vec<_>>(), DType::F32, &dev);
        let target = stack(&tgt)?;
        let noise = rng::normal_vec(&mut r, target.elem_count());
        let eps = Tensor::from_vec(noise, target.dims(), &dev)?;
        let contrast = if self.config.phase == 2 {
            Some((stack(&pos)?, stack(&neg)?))
        } else {
            None
        };
        Ok(Batch {
            source: stack(&src)?,
            reference: stack(&refs)?,
            target,
            ts,
            eps,
            contrast,
        })
    }

    /// Loss graph of a step without applying an update.
    pub fn evaluate(&self, step: usize) -> Result<(Tensor, LossReport)> {
        let b = self.assemble(step)?;
        let x_t = forward_diffuse_batch(&b.target, &b.ts, &b.eps, &self.table)?;
        let t = Tensor::new(b.ts.iter().map(|&t| t as f64).collect::<Vec<_>>(), &Device::Cpu)?;
        let pred = self.model.predict_noise(&x_t, &t, &b.source, &b.reference)?;
        let contrast = b.contrast.as_ref().map(|(p, n)| ContrastTargets {
            positives: p,
            negatives: n,
            k: self.negatives,
            layers: &self.config.sc_layers,
            tau: self.config.tau,
        });
        let out = StepOutputs {
            target: &b.target,
            x_t: &x_t,
            ts: &b.ts,
            eps: &b.eps,
            eps_hat: &pred.eps,
            offsets: &pred.offsets,
        };
        let l = step_losses(&self.table, &self.extractor, &self.config.cp_layers, &out, contrast.as_ref())?;
        let w = self.weights();
        let mut total = ((&l.mse + l.cp.affine(w.cp, 0.0)?)? + l.offset.affine(w.offset, 0.0)?)?;
        let sc = match &l.sc {
            Some(sc) => {
                // A zero weight keeps the term out of the graph entirely.
                if w.sc != 0.0 {
                    total = (total + sc.affine(w.sc, 0.0)?)?;
                }
                Some(scalar(sc)?)
            }
            None => None,
        };
        let report = LossReport::compose(scalar(&l.mse)?, scalar(&l.cp)?, scalar(&l.offset)?, sc, w);
        let values = [Some(report.total), Some(report.mse), Some(report.cp), Some(report.offset), report.sc];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                t: b.ts,
                detail: format!(
                    "mse {} cp {} offset {} sc {:?}",
                    report.mse, report.cp, report.offset, report.sc
                ),
            });
        }
        Ok((total, report))
    }

    /// Runs the next step and applies one optimizer update.
    pub fn train_step(&mut self) -> Result<LossReport> {
        if self.step >= self.config.steps {
            return Err(Error::config(format!("all {} steps already ran", self.config.steps)));
        }
        let (total, report) = self.evaluate(self.step)?;
        let grads = total.backward()?;
        let lr = self.config.lr_schedule().at(self.step);
        self.optimizer.step(&grads, lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Writes model, schedule, optimizer state, step counter and config.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        save_schedule(&self.config.schedule, dir)?;
        self.optimizer.save(&dir.join(OPT_MANIFEST), &dir.join(OPT_BLOB))?;
        self.config.save(&dir.join(TRAIN_CONFIG_FILE))?;
        let state = TrainState {
            phase: self.config.phase,
            step: self.step,
            seed: self.config.seed,
        };
        let path = dir.join(STATE_FILE);
        let text = toml::to_string(&state).map_err(|e| Error::config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

/// `min(requested, fonts available for every training char)`.
fn scaled_negatives(sampler: &TripletSampler, requested: usize) -> Result<usize> {
    let mut per_char = std::collections::BTreeMap::new();
    for &(_, c) in sampler.pairs() {
        *per_char.entry(c).or_insert(0usize) += 1;
    }
    let available = per_char.values().copied().min().unwrap_or(0).saturating_sub(1);
    let k = requested.min(available);
    if k == 0 {
        return Err(Error::config("every training char needs at least two fonts for negatives"));
    }
    Ok(k)
}

pub fn csv_header(phase: u8) -> &'static str {
    if phase == 2 {
        "step,total,mse,cp,offset,sc"
    } else {
        "step,total,mse,cp,offset"
    }
}

pub fn csv_row(step: usize, r: &LossReport) -> String {
    let mut row = format!("{step},{},{},{},{}", r.total, r.mse, r.cp, r.offset);
    if let Some(sc) = r.sc {
        row.push_str(&format!(",{sc}"));
    }
    row
}

/// Runs (or resumes) a phase, writing the loss CSV and checkpoints into
/// `out`. Returns `out`.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    split: &SplitSpec,
    out: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(config.clone(), corpus, split, dir)?,
        None => Trainer::new(config.clone(), corpus, split)?,
    };
    let mut rows = vec![csv_header(config.phase).to_string()];
    if let Some(dir) = resume {
        let path = dir.join(LOSS_CSV);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kept: Vec<&str> = text.lines().skip(1).take(trainer.step_index()).collect();
        if kept.len() != trainer.step_index() {
            return Err(Error::Checkpoint {
                path,
                msg: format!("holds {} rows, checkpoint is at step {}", kept.len(), trainer.step_index()),
            });
        }
        rows.extend(kept.into_iter().map(String::from));
    }
    let csv_path = out.join(LOSS_CSV);
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    for row in &rows {
        writeln!(csv, "{row}").map_err(|e| Error::io(&csv_path, e))?;
    }
    while trainer.step_index() < config.steps {
        let step = trainer.step_index();
        let report = trainer.train_step()?;
        writeln!(csv, "{}", csv_row(step, &report)).map_err(|e| Error::io(&csv_path, e))?;
        on_step(step, &report);
        let done = trainer.step_index();
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
            csv.flush().map_err(|e| Error::io(&csv_path, e))?;
            trainer.save(out)?;
        }
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    trainer.save(out)?;
    Ok(out.to_path_buf())
}
