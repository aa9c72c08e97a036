use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{deform_unfold, Init, ParamBuilder};

/// Stride-1 deformable convolution (one offset group, no modulation):
/// each `k×k` tap samples the input bilinearly at its nominal position plus
/// a per-position `(dy, dx)` offset; out-of-bounds reads are zero.
pub fn deformable_conv(x: &Tensor, offsets: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(Error::shape(format!(
            "deformable conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let cols = deform_unfold(x, offsets, k)?;
    let y = weight.reshape((o, c * k * k))?.broadcast_matmul(&cols)?;
    let y = match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, o, 1))?)?,
        None => y,
    };
    Ok(y.reshape((n, o, h, w))?)
}

#[derive(Clone, Debug)]
pub struct DeformConv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl DeformConv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            weight: pb.get(&[c_out, c_in, kernel, kernel], "weight", Init::Fan { fan_in, gain: 3f64.sqrt() })?,
            bias: pb.get(&[c_out], "bias", Init::Fan { fan_in, gain: 1.0 })?,
            kernel,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        deformable_conv(x, offsets, &self.weight, Some(&self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_relative_error;
    use candle_core::{DType, Device, Var};

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_offsets_equal_standard_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 5), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
        let b = Tensor::randn(0f64, 1.0, 4, &dev).unwrap();
        let off = Tensor::zeros((2, 18, 6, 5), DType::F64, &dev).unwrap();
        let ours = deformable_conv(&x, &off, &w, Some(&b)).unwrap();
        // candle's own convolution is the oracle.
        let reference = x.conv2d(&w, 1, 1, 1, 1).unwrap().broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap()).unwrap();
        let d = flat(&(ours - reference).unwrap()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1e-5, "max diff {d}");
    }

    #[test]
    fn unit_column_offset_is_a_left_shift() {
        let dev = Device::Cpu;
        let (h, wd) = (6, 7);
        let x = Tensor::randn(0f64, 1.0, (1, 2, h, wd), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 2, 3, 3), &dev).unwrap();
        let mut off = vec![0.0f64; 18 * h * wd];
        for j in 0..9 {
            for v in &mut off[(2 * j + 1) * h * wd..(2 * j + 2) * h * wd] {
                *v = 1.0;
            }
        }
        let off = Tensor::from_vec(off, (1, 18, h, wd), &dev).unwrap();
        let ours = deformable_conv(&x, &off, &w, None).unwrap();
        // Shift x left by one column (x'[.., j] = x[.., j + 1]) and convolve.
        let shifted = x.narrow(3, 1, wd - 1).unwrap().pad_with_zeros(3, 0, 1).unwrap();
        let reference = shifted.conv2d(&w, 1, 1, 1, 1).unwrap();
        let a = ours.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let b = reference.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for o in 0..3 {
            for y in 1..h - 1 {
                for xx in 1..wd - 2 {
                    assert!((a[o][y][xx] - b[o][y][xx]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn half_pixel_on_a_ramp() {
        let dev = Device::Cpu;
        let (h, wd) = (4, 6);
        let ramp: Vec<f64> = (0..h * wd).map(|i| (i % wd) as f64).collect();
        let x = Tensor::from_vec(ramp, (1, 1, h, wd), &dev).unwrap();
        let mut off = vec![0.0f64; 2 * h * wd];
        off[h * wd..].iter_mut().for_each(|v| *v = 0.5);
        let off = Tensor::from_vec(off, (1, 2, h, wd), &dev).unwrap();
        let w = Tensor::ones((1, 1, 1, 1), DType::F64, &dev).unwrap();
        let out = deformable_conv(&x, &off, &w, None).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        let out = out.to_vec2::<f64>().unwrap();
        for row in &out {
            for (xx, v) in row.iter().enumerate().take(wd - 1) {
                assert!((v - (xx as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_offsets_are_rejected() {
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 2, 4, 4), DType::F64, &dev).unwrap();
        let w = Tensor::zeros((2, 2, 3, 3), DType::F64, &dev).unwrap();
        let off = Tensor::zeros((1, 18, 4, 3), DType::F64, &dev).unwrap();
        assert!(matches!(deformable_conv(&x, &off, &w, None), Err(Error::Shape(_))));
    }

    fn gradient_case(seed: u64) -> (Var, Var, Var) {
        use rand::Rng;
        let dev = Device::Cpu;
        let mut r = crate::rng::stream(seed, "dcn-grad", 0);
        let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| r.gen_range(lo..hi)).collect() };
        let x = Tensor::from_vec(draw(2 * 25, -1.0, 1.0), (1, 2, 5, 5), &dev).unwrap();
        // Keep offsets away from integers, where bilinear weights have kinks.
        let off: Vec<f64> = draw(18 * 25, -1.5, 1.5)
            .into_iter()
            .map(|v| {
                let frac = v - v.floor();
                if !(0.1..=0.9).contains(&frac) { v.floor() + 0.5 } else { v }
            })
            .collect();
        let off = Tensor::from_vec(off, (1, 18, 5, 5), &dev).unwrap();
        let w = Tensor::from_vec(draw(2 * 2 * 9, -0.5, 0.5), (2, 2, 3, 3), &dev).unwrap();
        (Var::from_tensor(&x).unwrap(), Var::from_tensor(&off).unwrap(), Var::from_tensor(&w).unwrap())
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let (x, off, w) = gradient_case(seed);
            let probe = Tensor::randn(0f64, 1.0, (1, 2, 5, 5), &Device::Cpu).unwrap();
            let loss = || -> Result<Tensor> {
                let y = deformable_conv(x.as_tensor(), off.as_tensor(), w.as_tensor(), None)?;
                Ok((y * &probe)?.sum_all()?)
            };
            for (name, var) in [("x", &x), ("offsets", &off), ("weight", &w)] {
                let idx: Vec<usize> = (0..var.elem_count()).step_by(3).collect();
                let err = max_relative_error(var, loss, &idx, 1e-4, 1e-6).unwrap();
                assert!(err < 1e-3, "{name}: relative error {err}");
            }
        }
    }
}
