use candle_core::Tensor;

use super::attention::StyleAttention;
use super::channel_attention::ChannelAttention;
use super::resblock::ResBlock;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McaDims {
    pub in_channels: usize,
    pub content_channels: usize,
    pub out_channels: usize,
    pub style_dim: usize,
    pub time_dim: usize,
    pub heads: usize,
    pub downsample: bool,
}

/// Content-aggregation block: fuses the UNet feature with a content feature
/// of the same resolution, then attends to the style tokens.
#[derive(Clone, Debug)]
pub struct McaBlock {
    gate: ChannelAttention,
    reduce: Conv2d,
    res: ResBlock,
    attn: StyleAttention,
    down: Option<Conv2d>,
    dims: McaDims,
}

impl McaBlock {
    pub fn new(pb: &ParamBuilder, dims: McaDims) -> Result<Self> {
        let fused = dims.in_channels + dims.content_channels;
        Ok(Self {
            gate: ChannelAttention::new(&pb.pp("gate"), fused)?,
            reduce: Conv2d::new(&pb.pp("reduce"), fused, dims.out_channels, 1, 1)?,
            res: ResBlock::new(&pb.pp("res"), dims.out_channels, dims.out_channels, dims.time_dim)?,
            attn: StyleAttention::new(&pb.pp("attn"), dims.out_channels, dims.style_dim, dims.heads)?,
            down: if dims.downsample {
                Some(Conv2d::new(&pb.pp("down"), dims.out_channels, dims.out_channels, 3, 2)?)
            } else {
                None
            },
            dims,
        })
    }

    pub fn dims(&self) -> McaDims {
        self.dims
    }

    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let (h, w) = if self.dims.downsample { (h.div_ceil(2), w.div_ceil(2)) } else { (h, w) };
        (self.dims.out_channels, h, w)
    }

    pub fn forward(&self, r: &Tensor, content: &Tensor, style: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = r.dims4()?;
        let (_, _, hc, wc) = content.dims4()?;
        if (h, w) != (hc, wc) {
            return Err(Error::shape(format!(
                "content feature {hc}x{wc} is not aligned with UNet feature {h}x{w}"
            )));
        }
        let fused = self.gate.forward(&Tensor::cat(&[r, content], 1)?)?;
        let x = self.reduce.forward(&fused)?;
        let x = self.res.forward(&x, t_emb)?;
        let x = self.attn.forward_map(&x, style)?;
        match &self.down {
            Some(d) => d.forward(&x),
            None => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_relative_error;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, Var};

    fn dims(downsample: bool) -> McaDims {
        McaDims {
            in_channels: 4,
            content_channels: 2,
            out_channels: 8,
            style_dim: 6,
            time_dim: 4,
            heads: 1,
            downsample,
        }
    }

    fn inputs(dtype: DType) -> (Tensor, Tensor, Tensor, Tensor) {
        let dev = Device::Cpu;
        (
            Tensor::randn(0f32, 1.0, (2, 4, 6, 6), &dev).unwrap().to_dtype(dtype).unwrap(),
            Tensor::randn(0f32, 1.0, (2, 2, 6, 6), &dev).unwrap().to_dtype(dtype).unwrap(),
            Tensor::randn(0f32, 1.0, (2, 3, 6), &dev).unwrap().to_dtype(dtype).unwrap(),
            Tensor::randn(0f32, 1.0, (2, 4), &dev).unwrap().to_dtype(dtype).unwrap(),
        )
    }

    #[test]
    fn fresh_block_ignores_style() {
        let store = ParamStore::new(DType::F64, 3);
        let block = McaBlock::new(&store.root(), dims(false)).unwrap();
        let (r, c, s, t) = inputs(DType::F64);
        let a = block.forward(&r, &c, &s, &t).unwrap();
        let b = block.forward(&r, &c, &(s * -5.0).unwrap(), &t).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn trained_block_depends_on_style() {
        let store = ParamStore::new(DType::F64, 3);
        let block = McaBlock::new(&store.root(), dims(false)).unwrap();
        store.randomize(9, 0.3).unwrap();
        let (r, c, s, t) = inputs(DType::F64);
        let a = block.forward(&r, &c, &s, &t).unwrap();
        let b = block.forward(&r, &c, &(s * -5.0).unwrap(), &t).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d > 1e-6);
    }

    #[test]
    fn shape_contract() {
        for down in [false, true] {
            let store = ParamStore::new(DType::F32, 1);
            let block = McaBlock::new(&store.root(), dims(down)).unwrap();
            let (r, c, s, t) = inputs(DType::F32);
            let y = block.forward(&r, &c, &s, &t).unwrap();
            let (ch, h, w) = block.output_shape(6, 6);
            assert_eq!(y.dims(), &[2, ch, h, w]);
            assert_eq!(h, if down { 3 } else { 6 });
        }
    }

    #[test]
    fn misaligned_content_is_rejected() {
        let store = ParamStore::new(DType::F32, 1);
        let block = McaBlock::new(&store.root(), dims(false)).unwrap();
        let (r, _, s, t) = inputs(DType::F32);
        let c = Tensor::zeros((2, 2, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(block.forward(&r, &c, &s, &t), Err(Error::Shape(_))));
    }

    #[test]
    fn content_gradient_matches_finite_differences() {
        let store = ParamStore::new(DType::F64, 5);
        let d = McaDims {
            in_channels: 2,
            content_channels: 1,
            out_channels: 4,
            style_dim: 3,
            time_dim: 4,
            heads: 1,
            downsample: true,
        };
        let block = McaBlock::new(&store.root(), d).unwrap();
        store.randomize(2, 0.4).unwrap();
        let dev = Device::Cpu;
        let r = Tensor::randn(0f64, 1.0, (1, 2, 4, 4), &dev).unwrap();
        let content = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 1, 4, 4), &dev).unwrap()).unwrap();
        let s = Tensor::randn(0f64, 1.0, (1, 2, 3), &dev).unwrap();
        let t = Tensor::randn(0f64, 1.0, (1, 4), &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (1, 4, 2, 2), &dev).unwrap();
        let loss = || -> Result<Tensor> {
            let y = block.forward(&r, content.as_tensor(), &s, &t)?;
            Ok((y * &probe)?.sum_all()?)
        };
        let grad_norm = loss().unwrap().backward().unwrap().get(&content).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(grad_norm > 1e-6);
        let err = max_relative_error(&content, loss, &(0..16).collect::<Vec<_>>(), 1e-5, 1e-6).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
