use candle_core::Tensor;

use super::attention::scaled_dot_product;
use super::dcn::DeformConv2d;
use crate::error::{Error, Result};
use crate::nn::{from_tokens, silu, to_tokens, Linear, ParamBuilder};

pub const DCN_KERNEL: usize = 3;

/// Structure-guided skip deformation. Structure tokens query the skip
/// feature's tokens; an FFN turns the attended features into per-position
/// tap offsets that drive a deformable convolution of the skip feature.
#[derive(Clone, Debug)]
pub struct RsiBlock {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
    dcn: DeformConv2d,
    channels: usize,
    structure_channels: usize,
}

impl RsiBlock {
    pub fn new(pb: &ParamBuilder, channels: usize, structure_channels: usize) -> Result<Self> {
        let taps = 2 * DCN_KERNEL * DCN_KERNEL;
        Ok(Self {
            to_q: Linear::no_bias(&pb.pp("to_q"), structure_channels, channels)?,
            to_k: Linear::no_bias(&pb.pp("to_k"), channels, channels)?,
            to_v: Linear::no_bias(&pb.pp("to_v"), channels, channels)?,
            ffn_in: Linear::new(&pb.pp("ffn_in"), channels, channels)?,
            ffn_out: Linear::zeroed(&pb.pp("ffn_out"), channels, taps)?,
            dcn: DeformConv2d::new(&pb.pp("dcn"), channels, channels, DCN_KERNEL)?,
            channels,
            structure_channels,
        })
    }

    pub fn dcn(&self) -> &DeformConv2d {
        &self.dcn
    }

    /// Returns the deformed feature (same shape as `r`) and the offsets
    /// `N×2k²×H×W`.
    pub fn forward(&self, r: &Tensor, structure: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = r.dims4()?;
        let (ns, cs, hs, ws) = structure.dims4()?;
        if c != self.channels || cs != self.structure_channels || (n, h, w) != (ns, hs, ws) {
            return Err(Error::shape(format!(
                "skip deformation expects {}-channel skip and {}-channel structure of equal size, got {:?} and {:?}",
                self.channels,
                self.structure_channels,
                r.dims(),
                structure.dims()
            )));
        }
        let skip_tokens = to_tokens(r)?;
        let q = self.to_q.forward(&to_tokens(structure)?)?;
        let k = self.to_k.forward(&skip_tokens)?;
        let v = self.to_v.forward(&skip_tokens)?;
        let (attended, _) = scaled_dot_product(&q, &k, &v)?;
        let offsets = self.ffn_out.forward(&silu(&self.ffn_in.forward(&attended)?)?)?;
        let offsets = from_tokens(&offsets, h, w)?;
        Ok((self.dcn.forward(r, &offsets)?, offsets))
    }
}
