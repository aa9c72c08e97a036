//! The conditional denoiser: content and style encoders around a UNet
//! with content aggregation, deformed skips and style insertion.

mod config;
mod encoders;
mod unet;

use std::path::Path;

use candle_core::{DType, Device, Tensor};

pub use config::ModelConfig;
pub use encoders::{ContentEncoder, StyleEncoder};
pub use unet::{Conditions, StageShape, UNet, STAGE_NAMES};

use crate::blocks::TimeEmbedding;
use crate::checkpoint::{load_params, save_params};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MODEL_CONFIG_FILE: &str = "model.toml";

/// Output of one denoiser evaluation.
#[derive(Clone, Debug)]
pub struct NoisePrediction {
    pub eps: Tensor,
    /// Skip-deformation offsets at 1/4 and 1/2 resolution.
    pub offsets: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct GlyphDiffusion {
    config: ModelConfig,
    store: ParamStore,
    time: TimeEmbedding,
    content: ContentEncoder,
    style: StyleEncoder,
    unet: UNet,
}

impl GlyphDiffusion {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        Ok(Self {
            time: TimeEmbedding::new(&root.pp("time"), config.time_dim)?,
            content: ContentEncoder::new(&root.pp("content_encoder"), config.content_channels)?,
            style: StyleEncoder::new(&root.pp("style_encoder"), config.style_channels, config.style_dim)?,
            unet: UNet::new(&root.pp("unet"), &config)?,
            config,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn encode_content(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.content.forward(x, 3)
    }

    /// Structure maps of the reference: the content encoder's first two scales.
    pub fn encode_structure(&self, x_s: &Tensor) -> Result<Vec<Tensor>> {
        self.content.forward(x_s, 2)
    }

    pub fn encode_style(&self, x_s: &Tensor) -> Result<Tensor> {
        self.style.forward(x_s)
    }

    /// Denoiser for a batch: `x_t`, `x_c`, `x_s` are `B×3×H×W` with `H, W`
    /// multiples of 16; `t` holds `B` (possibly fractional) timesteps.
    pub fn predict_noise(&self, x_t: &Tensor, t: &Tensor, x_c: &Tensor, x_s: &Tensor) -> Result<NoisePrediction> {
        self.forward_impl(x_t, t, x_c, x_s, None)
    }

    /// Runs one forward pass and returns each stage's output shape.
    pub fn stage_shapes(&self, x_t: &Tensor, t: &Tensor, x_c: &Tensor, x_s: &Tensor) -> Result<Vec<StageShape>> {
        let mut trace = Vec::new();
        self.forward_impl(x_t, t, x_c, x_s, Some(&mut trace))?;
        Ok(trace)
    }

    fn forward_impl(
        &self,
        x_t: &Tensor,
        t: &Tensor,
        x_c: &Tensor,
        x_s: &Tensor,
        trace: Option<&mut Vec<StageShape>>,
    ) -> Result<NoisePrediction> {
        let dims = x_t.dims4()?;
        if x_c.dims4()? != dims || x_s.dims4()? != dims {
            return Err(Error::shape(format!(
                "x_t {:?}, x_c {:?} and x_s {:?} must share one shape",
                x_t.dims(),
                x_c.dims(),
                x_s.dims()
            )));
        }
        let (b, c, h, w) = dims;
        if c != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "denoiser needs 3×H×W images with H, W multiples of 16, got {:?}",
                x_t.dims()
            )));
        }
        if t.elem_count() != b {
            return Err(Error::shape(format!("{} timesteps for a batch of {b}", t.elem_count())));
        }
        let temb = self.time.forward(t)?;
        // One encoder pass over content and reference together.
        let feats = self.content.forward(&Tensor::cat(&[x_c, x_s], 0)?, 3)?;
        let content: Vec<Tensor> = feats.iter().map(|f| f.narrow(0, 0, b)).collect::<candle_core::Result<_>>()?;
        let structure: Vec<Tensor> = feats[..2].iter().map(|f| f.narrow(0, b, b)).collect::<candle_core::Result<_>>()?;
        let style = self.style.forward(x_s)?;
        let cond = Conditions {
            time: &temb,
            style: &style,
            content: &content,
            structure: &structure,
        };
        let (eps, offsets) = self.unet.forward(x_t, &cond, trace)?;
        Ok(NoisePrediction { eps, offsets })
    }

    /// Writes `model.toml` plus the parameter archive into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.config.save(&dir.join(MODEL_CONFIG_FILE))?;
        save_params(&self.store, dir)
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let config = ModelConfig::load(&dir.join(MODEL_CONFIG_FILE))?;
        let model = Self::new(config, dtype, 0)?;
        load_params(&model.store, dir)?;
        Ok(model)
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }
}

/// Parameter count recorded in the golden file for a named config.
pub fn golden_param_count(name: &str) -> Option<usize> {
    include_str!("../../tests/golden/param_counts.txt")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('\t'))
        .find(|(n, _)| *n == name)
        .and_then(|(_, v)| v.trim().parse().ok())
}
