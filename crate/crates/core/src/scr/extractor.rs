use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_params, save_params};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, global_max_pool, max_pool2x, relu, Conv2d, Linear, ParamStore};

pub const SCR_CONFIG_FILE: &str = "scr.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrConfig {
    /// Trunk width of each stage; stages are separated by 2×2 max pooling.
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub proj_dim: usize,
}

impl Default for ScrConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![32, 64, 128, 256, 256, 256],
            convs_per_stage: 2,
            proj_dim: 128,
        }
    }
}

impl ScrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) || self.convs_per_stage == 0 || self.proj_dim == 0 {
            return Err(Error::config(format!("invalid style extractor config {self:?}")));
        }
        Ok(())
    }
}

/// VGG-style trunk plus one pooled-feature projector per stage.
#[derive(Clone, Debug)]
pub struct StyleExtractor {
    config: ScrConfig,
    store: ParamStore,
    stages: Vec<Vec<Conv2d>>,
    projectors: Vec<Linear>,
}

impl StyleExtractor {
    pub fn new(config: ScrConfig, dtype: DType, seed: u64) -> Result<Self> {
        Self::build(config, ParamStore::new(dtype, seed))
    }

    /// An extractor whose parameters never receive gradients.
    pub fn new_frozen(config: ScrConfig, dtype: DType, seed: u64) -> Result<Self> {
        Self::build(config, ParamStore::new(dtype, seed).frozen())
    }

    fn build(config: ScrConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        let mut stages = Vec::new();
        let mut projectors = Vec::new();
        let mut c_in = 3;
        for (s, &c) in config.stage_widths.iter().enumerate() {
            let pb = root.pp(format!("stage{s}"));
            let convs = (0..config.convs_per_stage)
                .map(|i| Conv2d::new(&pb.pp(format!("conv{i}")), if i == 0 { c_in } else { c }, c, 3, 1))
                .collect::<Result<Vec<_>>>()?;
            stages.push(convs);
            projectors.push(Linear::new(&root.pp(format!("proj{s}")), 2 * c, config.proj_dim)?);
            c_in = c;
        }
        Ok(Self {
            config,
            store,
            stages,
            projectors,
        })
    }

    pub fn config(&self) -> &ScrConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_layers(&self) -> usize {
        self.stages.len()
    }

    fn check_layers(&self, layers: &[usize]) -> Result<usize> {
        match layers.iter().find(|&&l| l >= self.num_layers()) {
            Some(l) => Err(Error::domain(format!(
                "layer {l} requested from a {}-layer extractor",
                self.num_layers()
            ))),
            None => Ok(layers.iter().copied().max().map_or(0, |m| m + 1)),
        }
    }

    /// Post-activation stage outputs `f_v^0 … f_v^{depth−1}`.
    pub fn trunk_features(&self, x: &Tensor, depth: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (s, convs) in self.stages.iter().take(depth).enumerate() {
            if s > 0 {
                h = max_pool2x(&h)?;
            }
            for conv in convs {
                h = relu(&conv.forward(&h)?)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Trunk features at the requested layers only.
    pub fn features(&self, x: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        let depth = self.check_layers(layers)?;
        let all = self.trunk_features(x, depth)?;
        Ok(layers.iter().map(|&l| all[l].clone()).collect())
    }

    /// One unit-norm `N×proj_dim` style vector per requested layer.
    pub fn style_vectors(&self, x: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        let feats = self.features(x, layers)?;
        layers
            .iter()
            .zip(feats)
            .map(|(&l, f)| self.project(l, &f))
            .collect()
    }

    /// `normalize(Linear_l([avgpool(f), maxpool(f)]))`.
    pub fn project(&self, layer: usize, f: &Tensor) -> Result<Tensor> {
        let pooled = Tensor::cat(&[global_avg_pool(f)?, global_max_pool(f)?], 1)?;
        l2_normalize(&self.projectors[layer].forward(&pooled)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string(&self.config).map_err(|e| Error::config(e.to_string()))?;
        let path = dir.join(SCR_CONFIG_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        save_params(&self.store, dir)
    }

    pub fn load(dir: &Path, dtype: DType, frozen: bool) -> Result<Self> {
        let path = dir.join(SCR_CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ScrConfig = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let ex = if frozen {
            Self::new_frozen(config, dtype, 0)?
        } else {
            Self::new(config, dtype, 0)?
        };
        load_params(&ex.store, dir)?;
        Ok(ex)
    }
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn small() -> ScrConfig {
        ScrConfig {
            stage_widths: vec![4, 8, 8, 8, 8, 8],
            convs_per_stage: 1,
            proj_dim: 16,
        }
    }

    #[test]
    fn vectors_are_unit_norm_and_counted() {
        let ex = StyleExtractor::new(small(), DType::F64, 0).unwrap();
        let x = Tensor::randn(0f64, 1.0, (3, 3, 32, 32), &Device::Cpu).unwrap();
        let v = ex.style_vectors(&x, &[0, 1, 2, 3]).unwrap();
        assert_eq!(v.len(), 4);
        for t in &v {
            assert_eq!(t.dims(), &[3, 16]);
            for n in t.sqr().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap() {
                assert!((n.sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let again = ex.style_vectors(&x, &[0, 1, 2, 3]).unwrap();
        for (a, b) in v.iter().zip(&again) {
            assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
        }
    }

    #[test]
    fn zero_features_project_to_normalized_bias() {
        let ex = StyleExtractor::new(small(), DType::F64, 1).unwrap();
        let f = Tensor::zeros((1, 8, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let v = ex.project(2, &f).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        let bias = ex.projectors[2].bias().unwrap().to_vec1::<f64>().unwrap();
        let n = bias.iter().map(|b| b * b).sum::<f64>().sqrt();
        for (a, b) in v.iter().zip(&bias) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_layer_is_a_domain_error() {
        let ex = StyleExtractor::new(small(), DType::F32, 0).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ex.style_vectors(&x, &[1, 6]), Err(Error::Domain(_))));
    }

    #[test]
    fn frozen_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ex = StyleExtractor::new(small(), DType::F32, 4).unwrap();
        ex.save(dir.path()).unwrap();
        let back = StyleExtractor::load(dir.path(), DType::F32, true).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let a = ex.style_vectors(&x, &[0, 5]).unwrap();
        let b = back.style_vectors(&x, &[0, 5]).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
        }
        let loss = b[0].sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(back.store().vars().iter().all(|(_, v)| grads.get(v).is_none()));
    }
}
