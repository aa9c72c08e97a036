use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, LrSchedule};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::schedule::ScheduleConfig;
use crate::scr::DEFAULT_TAU;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    /// Linear decay from `lr` to 0 over `steps`.
    LinearDecay,
    Constant,
}

/// Settings for one training phase. Phase 1 trains reconstruction only;
/// phase 2 adds the style contrastive term against a frozen extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: u8,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub lr_kind: LrKind,
    pub lambda_cp: f64,
    pub lambda_off: f64,
    pub lambda_sc: f64,
    /// Requested negatives per sample; capped by the fonts available.
    pub negatives: usize,
    pub tau: f64,
    /// Joint probability of replacing both conditions by the null image.
    pub dropout: f64,
    pub cp_layers: Vec<usize>,
    pub sc_layers: Vec<usize>,
    /// Frozen extractor for the perceptual and contrastive terms. Phase 1
    /// falls back to a seeded random trunk when absent.
    pub scr_checkpoint: Option<PathBuf>,
    /// Checkpoint to warm-start from (the phase-1 result for phase 2).
    pub init_checkpoint: Option<PathBuf>,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
}

impl TrainConfig {
    pub fn phase1() -> Self {
        Self {
            phase: 1,
            steps: 1000,
            batch: 16,
            seed: 0,
            lr: 1e-4,
            lr_kind: LrKind::LinearDecay,
            lambda_cp: 0.01,
            lambda_off: 0.5,
            lambda_sc: 0.0,
            negatives: 0,
            tau: DEFAULT_TAU,
            dropout: 0.1,
            cp_layers: vec![0, 1, 2, 3],
            sc_layers: vec![0, 1, 2, 3],
            scr_checkpoint: None,
            init_checkpoint: None,
            checkpoint_every: 0,
            optimizer: AdamWConfig::default(),
            model: ModelConfig::canonical(),
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn phase2() -> Self {
        Self {
            phase: 2,
            lr: 1e-5,
            lr_kind: LrKind::Constant,
            lambda_sc: 0.01,
            negatives: 16,
            ..Self::phase1()
        }
    }

    pub fn defaults_for(phase: u8) -> Result<Self> {
        match phase {
            1 => Ok(Self::phase1()),
            2 => Ok(Self::phase2()),
            p => Err(Error::config(format!("unknown phase {p}; expected 1 or 2"))),
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self.lr_kind {
            LrKind::Constant => LrSchedule::Constant { lr: self.lr },
            LrKind::LinearDecay => LrSchedule::LinearDecay {
                lr: self.lr,
                total: self.steps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if !matches!(self.phase, 1 | 2) {
            return bad(format!("unknown phase {}", self.phase));
        }
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be at least 1".into());
        }
        for (name, v) in [
            ("lambda_cp", self.lambda_cp),
            ("lambda_off", self.lambda_off),
            ("lambda_sc", self.lambda_sc),
            ("lr", self.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.phase == 1 && self.lambda_sc != 0.0 {
            return bad("phase 1 has no contrastive term; set lambda_sc = 0".into());
        }
        if self.phase == 2 {
            if self.scr_checkpoint.is_none() {
                return bad("phase 2 needs scr_checkpoint".into());
            }
            if self.negatives == 0 {
                return bad("phase 2 needs at least one negative".into());
            }
        }
        self.model.validate()
    }

    /// Phase defaults overlaid with the keys present in a TOML file.
    pub fn from_toml(text: &str, phase: u8) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if let Some(p) = overlay.get("phase").and_then(|v| v.as_integer()) {
            if p != phase as i64 {
                return Err(Error::config(format!("config declares phase {p}, phase {phase} requested")));
            }
        }
        let base = toml::Table::try_from(Self::defaults_for(phase)?).map_err(|e| Error::config(e.to_string()))?;
        let merged = merge(base, overlay);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, phase: u8) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, phase).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Recursive table merge; scalars and arrays in `top` replace those in `base`.
fn merge(mut base: toml::Table, top: toml::Table) -> toml::Table {
    for (k, v) in top {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => {
                base.insert(k, toml::Value::Table(merge(b, t)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
