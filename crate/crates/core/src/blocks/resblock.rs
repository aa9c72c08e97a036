use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{silu, Conv2d, GroupNorm, Linear, ParamBuilder};

pub const NORM_GROUPS: usize = 8;

/// Largest group count ≤ 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=NORM_GROUPS).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Sinusoidal features of a real-valued timestep batch `B → B×dim`:
/// `[sin(t·ω_i), cos(t·ω_i)]` with `ω_i = 10000^{-i/(dim/2)}`.
pub fn sinusoidal_embedding(t: &Tensor, dim: usize, dtype: DType) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("timestep embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::new(freqs, t.device())?.reshape((1, half))?;
    let b = t.elem_count();
    let args = t.to_dtype(DType::F64)?.reshape((b, 1))?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.sin()?, args.cos()?], 1)?.to_dtype(dtype)?)
}

/// Sinusoidal features followed by a two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), dim, dim)?,
            fc2: Linear::new(&pb.pp("fc2"), dim, dim)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, t: &Tensor) -> Result<Tensor> {
        let dtype = self.fc1.weight().dtype();
        let e = sinusoidal_embedding(t, self.dim, dtype)?;
        self.fc2.forward(&silu(&self.fc1.forward(&e)?)?)
    }
}

/// Residual block `x ↦ skip(x) + conv(act(mod(norm(conv(act(norm(x)))), t)))`
/// where `mod` is a per-channel `(1 + scale)·h + shift` from the time embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    in_channels: usize,
    out_channels: usize,
}

impl ResBlock {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&pb.pp("norm1"), c_in, norm_groups(c_in))?,
            conv1: Conv2d::new(&pb.pp("conv1"), c_in, c_out, 3, 1)?,
            time_proj: Linear::new(&pb.pp("time_proj"), time_dim, 2 * c_out)?,
            norm2: GroupNorm::new(&pb.pp("norm2"), c_out, norm_groups(c_out))?,
            conv2: Conv2d::new(&pb.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&pb.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
            in_channels: c_in,
            out_channels: c_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `x`: `N×C_in×H×W`; `t_emb`: `N×time_dim`.
    pub fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let (n, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "resblock expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let ss = self
            .time_proj
            .forward(&silu(t_emb)?)?
            .reshape((n, 2 * self.out_channels, 1, 1))?;
        let scale = ss.narrow(1, 0, self.out_channels)?;
        let shift = ss.narrow(1, self.out_channels, self.out_channels)?;
        let h = self.norm2.forward(&h)?;
        let h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&silu(&h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}
