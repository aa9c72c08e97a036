use candle_core::Tensor;

use super::resblock::ResBlock;
use crate::error::Result;
use crate::nn::{upsample_nearest2x, Conv2d, ParamBuilder};

/// Resblock followed by an optional stride-2 convolution.
#[derive(Clone, Debug)]
pub struct DownBlock {
    res: ResBlock,
    down: Option<Conv2d>,
}

impl DownBlock {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, time_dim: usize, downsample: bool) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(&pb.pp("res"), c_in, c_out, time_dim)?,
            down: if downsample {
                Some(Conv2d::new(&pb.pp("down"), c_out, c_out, 3, 2)?)
            } else {
                None
            },
        })
    }

    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let (h, w) = if self.down.is_some() { (h.div_ceil(2), w.div_ceil(2)) } else { (h, w) };
        (self.res.out_channels(), h, w)
    }

    pub fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, t_emb)?;
        match &self.down {
            Some(d) => d.forward(&h),
            None => Ok(h),
        }
    }
}

/// Resblock followed by an optional nearest-×2 upsample and convolution.
#[derive(Clone, Debug)]
pub struct UpBlock {
    res: ResBlock,
    up: Option<Conv2d>,
}

impl UpBlock {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, time_dim: usize, upsample: bool) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(&pb.pp("res"), c_in, c_out, time_dim)?,
            up: if upsample {
                Some(Conv2d::new(&pb.pp("up"), c_out, c_out, 3, 1)?)
            } else {
                None
            },
        })
    }

    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let (h, w) = if self.up.is_some() { (2 * h, 2 * w) } else { (h, w) };
        (self.res.out_channels(), h, w)
    }

    pub fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, t_emb)?;
        upsample_then_conv(&h, self.up.as_ref())
    }
}

pub(crate) fn upsample_then_conv(h: &Tensor, conv: Option<&Conv2d>) -> Result<Tensor> {
    match conv {
        Some(c) => c.forward(&upsample_nearest2x(h)?),
        None => Ok(h.clone()),
    }
}
