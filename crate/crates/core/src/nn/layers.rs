use candle_core::{Tensor, D};

use super::ops::unfold_batched;
use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// `k×k` convolution with `k // 2` padding.
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(pb, c_in, c_out, kernel, stride, false)
    }

    /// Same as [`Conv2d::new`] but starts with all-zero weights and bias.
    pub fn zeroed(pb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(pb, c_in, c_out, kernel, stride, true)
    }

    fn with_init(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let (w_init, b_init) = if zero {
            (Init::Zeros, Init::Zeros)
        } else {
            (
                Init::Fan { fan_in, gain: 3f64.sqrt() },
                Init::Fan { fan_in, gain: 1.0 },
            )
        };
        Ok(Self {
            weight: pb.get(&[c_out, c_in, kernel, kernel], "weight", w_init)?,
            bias: pb.get(&[c_out], "bias", b_init)?,
            in_channels: c_in,
            out_channels: c_out,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let k = c * self.kernel * self.kernel;
        let (ho, wo) = (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        );
        // One O×K · K×(N·L) product for the whole batch.
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.transpose(0, 1)?.reshape((c, n * h * w))?
        } else {
            unfold_batched(x, self.kernel, self.stride, self.padding)?
        };
        let wmat = self.weight.reshape((self.out_channels, k))?;
        let y = wmat.matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.reshape((self.out_channels, 1))?)?;
        Ok(y.reshape((self.out_channels, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let init = Init::Fan { fan_in: d_in, gain: 1.0 };
        Ok(Self {
            weight: pb.get(&[d_out, d_in], "weight", Init::Fan { fan_in: d_in, gain: 3f64.sqrt() })?,
            bias: Some(pb.get(&[d_out], "bias", init)?),
        })
    }

    pub fn no_bias(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[d_out, d_in], "weight", Init::Fan { fan_in: d_in, gain: 3f64.sqrt() })?,
            bias: None,
        })
    }

    pub fn zeroed(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[d_out, d_in], "weight", Init::Zeros)?,
            bias: Some(pb.get(&[d_out], "bias", Init::Zeros)?),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: pb.get(&[channels], "gamma", Init::Ones)?,
            beta: pb.get(&[channels], "beta", Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let centered = g.broadcast_sub(&g.mean_keepdim(2)?)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.get(&[dim], "gamma", Init::Ones)?,
            beta: pb.get(&[dim], "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let centered = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Nearest-neighbour ×2 upsampling of an `N×C×H×W` map.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let x = x.narrow(2, 0, 2 * ho)?.narrow(3, 0, 2 * wo)?;
    Ok(x
        .reshape((n, c, ho, 2, wo, 2))?
        .max(5)?
        .max(3)?)
}

/// Spatial mean, `N×C×H×W → N×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.mean(2)?)
}

/// Spatial max, `N×C×H×W → N×C`.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.max(2)?)
}

/// `N×C×H×W → N×(H·W)×C` token sequence.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, l, c) = x.dims3()?;
    if l != h * w {
        return Err(Error::shape(format!("{l} tokens cannot fill a {h}x{w} map")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn direct_conv(x: &[f64], w: &[f64], b: &[f64], dims: (usize, usize, usize, usize), o: usize, k: usize, s: usize) -> Vec<f64> {
        let (n, c, h, wd) = dims;
        let p = k / 2;
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oc in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b[oc];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * s + ki) as isize - p as isize;
                                    let ix = (xx * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w[((oc * c + ci) * k + ki) * k + kj]
                                            * x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((ni * o + oc) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let store = ParamStore::new(DType::F64, 5);
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::new(&store.root().pp(format!("c{k}{s}")), 2, 3, k, s).unwrap();
            let x = Tensor::randn(0f64, 1.0, (2, 2, 5, 6), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap();
            let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let expected = direct_conv(&flat(&x), &flat(conv.weight()), &flat(conv.bias()), (2, 2, 5, 6), 3, k, s);
            let got = flat(&y);
            assert_eq!(got.len(), expected.len());
            for (a, b) in got.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::randn(0f64, 10.0, (3, 4, 7), &Device::Cpu).unwrap();
        let s = softmax_last_dim(&x).unwrap().sum(2).unwrap();
        for v in s.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let p = max_pool2x(&x).unwrap();
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![5.0, 7.0, 13.0, 15.0]);
        let u = upsample_nearest2x(&p).unwrap();
        assert_eq!(u.dims(), &[1, 1, 4, 4]);
        assert_eq!(u.get(0).unwrap().get(0).unwrap().get(1).unwrap().to_vec1::<f64>().unwrap(), vec![5.0, 5.0, 7.0, 7.0]);
    }
}
