use candle_core::Tensor;

use crate::blocks::norm_groups;
use crate::error::{Error, Result};
use crate::nn::{silu, to_tokens, Conv2d, GroupNorm, ParamBuilder};

#[derive(Clone, Debug)]
struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNormAct {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), c_in, c_out, 3, stride)?,
            norm: GroupNorm::new(&pb.pp("norm"), c_out, norm_groups(c_out))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        silu(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

fn check_image(x: &Tensor, what: &str) -> Result<()> {
    let (_, c, _, _) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("{what} expects 3-channel images, got {:?}", x.dims())));
    }
    Ok(())
}

/// Three (conv-norm-act ×2, stride-2 conv) blocks emitting features at
/// 1/2, 1/4 and 1/8 resolution.
#[derive(Clone, Debug)]
pub struct ContentEncoder {
    blocks: Vec<(ConvNormAct, ConvNormAct, Conv2d)>,
}

impl ContentEncoder {
    pub fn new(pb: &ParamBuilder, widths: [usize; 3]) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, &c) in widths.iter().enumerate() {
            let b = pb.pp(format!("block{i}"));
            blocks.push((
                ConvNormAct::new(&b.pp("a"), c_in, c, 1)?,
                ConvNormAct::new(&b.pp("b"), c, c, 1)?,
                Conv2d::new(&b.pp("down"), c, c, 3, 2)?,
            ));
            c_in = c;
        }
        Ok(Self { blocks })
    }

    /// Returns the first `depth` scales (at most 3).
    pub fn forward(&self, x: &Tensor, depth: usize) -> Result<Vec<Tensor>> {
        check_image(x, "content encoder")?;
        let mut out = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (a, b, down) in self.blocks.iter().take(depth) {
            h = down.forward(&b.forward(&a.forward(&h)?)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Four stride-2 conv blocks; the final `style_dim`-channel map is
/// flattened into `N×(H/16·W/16)×style_dim` tokens.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    blocks: Vec<ConvNormAct>,
}

impl StyleEncoder {
    pub fn new(pb: &ParamBuilder, widths: [usize; 3], style_dim: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, &c) in widths.iter().chain([&style_dim]).enumerate() {
            blocks.push(ConvNormAct::new(&pb.pp(format!("block{i}")), c_in, c, 2)?);
            c_in = c;
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x, "style encoder")?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        to_tokens(&h)
    }
}
