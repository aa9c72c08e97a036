use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths and depths of the encoders and the denoising UNet. Every parameter
/// shape is a function of this struct alone; none depends on resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// UNet widths at full, 1/4, 1/8 and mid resolution stages.
    pub unet_channels: [usize; 4],
    /// Content-encoder widths at 1/2, 1/4, 1/8 resolution.
    pub content_channels: [usize; 3],
    /// Widths of the first three style-encoder blocks; the fourth is `style_dim`.
    pub style_channels: [usize; 3],
    pub style_dim: usize,
    pub time_dim: usize,
    pub heads: usize,
    /// Blocks per stage: down1, mca1, mca2, down2, mca3, up1, si1, si2, up2.
    pub stage_repeats: [usize; 9],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl ModelConfig {
    pub fn canonical() -> Self {
        Self {
            unet_channels: [64, 128, 256, 512],
            content_channels: [64, 128, 256],
            style_channels: [64, 128, 256],
            style_dim: 256,
            time_dim: 256,
            heads: 1,
            stage_repeats: [2, 2, 2, 2, 1, 3, 3, 3, 3],
        }
    }

    /// Narrow single-block variant for desk-scale training runs.
    pub fn tiny() -> Self {
        Self {
            unet_channels: [16, 32, 48, 64],
            content_channels: [16, 32, 48],
            style_channels: [16, 32, 32],
            style_dim: 32,
            time_dim: 32,
            heads: 1,
            stage_repeats: [1; 9],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .unet_channels
            .iter()
            .chain(&self.content_channels)
            .chain(&self.style_channels)
            .chain([&self.style_dim, &self.time_dim]);
        if widths.clone().any(|&w| w == 0) {
            return Err(Error::config("model widths must be positive"));
        }
        if self.stage_repeats.iter().any(|&r| r == 0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("time_dim must be even"));
        }
        if self.heads == 0 || self.unet_channels.iter().any(|c| c % self.heads != 0) {
            return Err(Error::config(format!(
                "UNet widths {:?} are not divisible into {} heads",
                self.unet_channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
