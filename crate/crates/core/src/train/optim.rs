use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive, StoredTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning rate as a function of the 0-based step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr · (1 − step / total)`, reaching 0 at `total`.
    LinearDecay { lr: f64, total: usize },
    /// Linear ramp over `warmup` steps, then linear decay to 0 at `total`.
    WarmupLinear { lr: f64, warmup: usize, total: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::LinearDecay { lr, total } => lr * (1.0 - step as f64 / total.max(1) as f64).max(0.0),
            LrSchedule::WarmupLinear { lr, warmup, total } => {
                if step < warmup {
                    lr * (step + 1) as f64 / warmup as f64
                } else {
                    let rest = total.saturating_sub(warmup).max(1) as f64;
                    lr * (1.0 - (step - warmup) as f64 / rest).max(0.0)
                }
            }
        }
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
pub struct AdamW {
    config: AdamWConfig,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            config,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from `grads`; parameters without a gradient are
    /// left untouched (no decay, no moment update).
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (name, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p) else { continue };
            if g.dims() != p.dims() {
                return Err(Error::shape(format!(
                    "gradient of {name} is {:?}, parameter is {:?}",
                    g.dims(),
                    p.dims()
                )));
            }
            let m = (self.m[i].affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let v = (self.v[i].affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let update = m
                .affine(1.0 / bc1, 0.0)?
                .div(&(v.affine(1.0 / bc2, 0.0)?.sqrt()? + c.eps)?)?;
            let decayed = p.affine(1.0 - lr * c.weight_decay, 0.0)?;
            p.set(&(decayed - update.affine(lr, 0.0)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moments as `m.<name>` / `v.<name>` in a tensor archive.
    pub fn save(&self, manifest: &Path, blob: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(2 * self.params.len());
        for (i, (name, _)) in self.params.iter().enumerate() {
            entries.push((format!("m.{name}"), StoredTensor::from_tensor(&self.m[i])?));
            entries.push((format!("v.{name}"), StoredTensor::from_tensor(&self.v[i])?));
        }
        write_archive(manifest, blob, &entries)
    }

    pub fn load(&mut self, manifest: &Path, blob: &Path, step: usize) -> Result<()> {
        let mut stored: BTreeMap<String, StoredTensor> = read_archive(manifest, blob)?;
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{name}");
                let t = stored.remove(&key).ok_or_else(|| Error::Checkpoint {
                    path: manifest.to_path_buf(),
                    msg: format!("missing optimizer state {key}"),
                })?;
                if t.shape != p.dims() {
                    return Err(Error::Checkpoint {
                        path: manifest.to_path_buf(),
                        msg: format!("optimizer state {key} has shape {:?}, expected {:?}", t.shape, p.dims()),
                    });
                }
                *slot = t.to_tensor(p.dtype())?;
            }
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint {
                path: manifest.to_path_buf(),
                msg: format!("unexpected optimizer state {extra}"),
            });
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn scalar_var(v: f64) -> Var {
        Var::from_tensor(&Tensor::new(&[v], &Device::Cpu).unwrap()).unwrap()
    }

    fn value(v: &Var) -> f64 {
        v.to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn hand_step_with_bias_correction() {
        let w = scalar_var(0.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(vec![("w".into(), w.clone())], cfg).unwrap();
        // loss = w·1 has gradient 1.
        let grads = w.as_tensor().sum_all().unwrap().backward().unwrap();
        opt.step(&grads, 0.1).unwrap();
        assert!((value(&w) - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let w = scalar_var(0.37);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(vec![("w".into(), w.clone())], cfg).unwrap();
        let grads = w.as_tensor().affine(0.0, 0.0).unwrap().sum_all().unwrap().backward().unwrap();
        for _ in 0..3 {
            opt.step(&grads, 0.1).unwrap();
        }
        assert_eq!(value(&w), 0.37);
    }

    #[test]
    fn decay_is_decoupled() {
        let w = scalar_var(2.0);
        let mut opt = AdamW::new(vec![("w".into(), w.clone())], AdamWConfig::default()).unwrap();
        // Unit gradient: Adam's normalized step is 1 whatever the decay, so
        // coupled L2 would give 1.5 here.
        let grads = w.as_tensor().sum_all().unwrap().backward().unwrap();
        opt.step(&grads, 0.5).unwrap();
        let expected = 2.0 * (1.0 - 0.5 * 0.01) - 0.5 / (1.0 + 1e-8);
        assert!((value(&w) - expected).abs() < 1e-12, "{}", value(&w));
    }

    #[test]
    fn schedules() {
        let c = LrSchedule::Constant { lr: 1e-5 };
        assert_eq!(c.at(0), 1e-5);
        assert_eq!(c.at(10_000), 1e-5);
        let d = LrSchedule::LinearDecay { lr: 1.0, total: 4 };
        assert_eq!([d.at(0), d.at(1), d.at(3), d.at(4), d.at(9)], [1.0, 0.75, 0.25, 0.0, 0.0]);
        let w = LrSchedule::WarmupLinear { lr: 1.0, warmup: 4, total: 8 };
        assert_eq!([w.at(0), w.at(3), w.at(4), w.at(6), w.at(8)], [0.25, 1.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = Var::from_tensor(&Tensor::new(&[1.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![("w".into(), w.clone())], AdamWConfig::default()).unwrap();
        let grads = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads, 0.01).unwrap();
        let (mp, bp) = (dir.path().join("o.txt"), dir.path().join("o.bin"));
        opt.save(&mp, &bp).unwrap();
        let w2 = Var::from_tensor(&w.as_tensor().copy().unwrap()).unwrap();
        let mut opt2 = AdamW::new(vec![("w".into(), w2.clone())], AdamWConfig::default()).unwrap();
        opt2.load(&mp, &bp, 1).unwrap();
        let g1 = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = w2.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&g1, 0.01).unwrap();
        opt2.step(&g2, 0.01).unwrap();
        assert_eq!(w.to_vec1::<f32>().unwrap(), w2.to_vec1::<f32>().unwrap());
        assert_eq!(w.dtype(), DType::F32);
    }
}
