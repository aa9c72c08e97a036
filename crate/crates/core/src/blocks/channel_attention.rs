use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, relu, sigmoid, Conv2d, ParamBuilder};

/// Squeeze-and-excitation gate with a residual: `x + x ⊙ σ(W₂·relu(W₁·avgpool(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    squeeze: Conv2d,
    excite: Conv2d,
    channels: usize,
}

pub const REDUCTION: usize = 4;

impl ChannelAttention {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let hidden = (channels / REDUCTION).max(1);
        Ok(Self {
            squeeze: Conv2d::new(&pb.pp("squeeze"), channels, hidden, 1, 1)?,
            excite: Conv2d::new(&pb.pp("excite"), hidden, channels, 1, 1)?,
            channels,
        })
    }

    pub fn squeeze(&self) -> &Conv2d {
        &self.squeeze
    }

    pub fn excite(&self) -> &Conv2d {
        &self.excite
    }

    /// Per-channel gate `W_c`, shaped `N×C×1×1`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let pooled = global_avg_pool(x)?.reshape((n, c, 1, 1))?;
        let hidden = relu(&self.squeeze.forward(&pooled)?)?;
        sigmoid(&self.excite.forward(&hidden)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gated = x.broadcast_mul(&self.gate(x)?)?;
        Ok((x + gated)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn setup(bias: f64) -> (ParamStore, ChannelAttention) {
        let store = ParamStore::new(DType::F64, 1);
        let ca = ChannelAttention::new(&store.root(), 8).unwrap();
        let name = "excite.bias";
        store.assign(name, &Tensor::full(bias, 8, &Device::Cpu).unwrap()).unwrap();
        store.assign("excite.weight", &Tensor::zeros((8, 2, 1, 1), DType::F64, &Device::Cpu).unwrap()).unwrap();
        (store, ca)
    }

    fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
        let a = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        a.iter().zip(&b).map(|(x, y)| (x - y).abs() / y.abs().max(1e-12)).fold(0.0, f64::max)
    }

    #[test]
    fn closed_gate_is_pure_residual() {
        let (_s, ca) = setup(-30.0);
        let x = Tensor::randn(0f64, 1.0, (2, 8, 3, 3), &Device::Cpu).unwrap();
        assert!(max_rel(&ca.forward(&x).unwrap(), &x) < 1e-3);
    }

    #[test]
    fn saturated_gate_doubles() {
        let (_s, ca) = setup(30.0);
        let x = Tensor::randn(0f64, 1.0, (2, 8, 3, 3), &Device::Cpu).unwrap();
        assert!(max_rel(&ca.forward(&x).unwrap(), &(&x * 2.0).unwrap()) < 1e-3);
    }

    #[test]
    fn constant_channels_match_scalar_oracle() {
        let store = ParamStore::new(DType::F64, 2);
        let ca = ChannelAttention::new(&store.root(), 4).unwrap();
        let consts = [0.3, -1.2, 2.0, 0.0];
        let x = Tensor::new(&consts[..], &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 1, 1))
            .unwrap()
            .broadcast_as((1, 4, 5, 5))
            .unwrap()
            .contiguous()
            .unwrap();
        let w1 = ca.squeeze().weight().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b1 = ca.squeeze().bias().to_vec1::<f64>().unwrap();
        let w2 = ca.excite().weight().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b2 = ca.excite().bias().to_vec1::<f64>().unwrap();
        // Scalar evaluation of the two 1×1 layers.
        let hidden: Vec<f64> = (0..1)
            .map(|j| (b1[j] + (0..4).map(|i| w1[j * 4 + i] * consts[i]).sum::<f64>()).max(0.0))
            .collect();
        let gate: Vec<f64> = (0..4)
            .map(|i| 1.0 / (1.0 + (-(b2[i] + w2[i] * hidden[0])).exp()))
            .collect();
        let got = ca.gate(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (g, e) in got.iter().zip(&gate) {
            assert!((g - e).abs() < 1e-12);
        }
        let out = ca.forward(&x).unwrap();
        let corner = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..4 {
            assert!((corner[i * 25] - consts[i] * (1.0 + gate[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let store = ParamStore::new(DType::F64, 0);
        let ca = ChannelAttention::new(&store.root(), 8).unwrap();
        let x = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(ca.forward(&x), Err(Error::Shape(_))));
    }
}
