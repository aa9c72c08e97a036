use candle_core::Tensor;

use super::attention::StyleAttention;
use super::resblock::ResBlock;
use super::updown::upsample_then_conv;
use crate::error::Result;
use crate::nn::{Conv2d, ParamBuilder};

/// Style-insertion block: resblock, style cross-attention, optional ×2 upsample.
#[derive(Clone, Debug)]
pub struct SiBlock {
    res: ResBlock,
    attn: StyleAttention,
    up: Option<Conv2d>,
}

impl SiBlock {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        style_dim: usize,
        time_dim: usize,
        heads: usize,
        upsample: bool,
    ) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(&pb.pp("res"), c_in, c_out, time_dim)?,
            attn: StyleAttention::new(&pb.pp("attn"), c_out, style_dim, heads)?,
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

    pub fn forward(&self, r: &Tensor, style: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let x = self.res.forward(r, t_emb)?;
        let x = self.attn.forward_map(&x, style)?;
        upsample_then_conv(&x, self.up.as_ref())
    }
}
