//! Custom tensor ops wrapping the scalar kernels, with hand-written backward passes.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor};

use super::kernels::{self, ColumnLayout, DeformGeometry, UnfoldGeometry};
use crate::error::{Error, Result};

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("custom op requires a contiguous input"),
    }
}

fn tensor_vec<T: candle_core::WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.contiguous()?.flatten_all()?.to_vec1::<T>()
}

struct Unfold(UnfoldGeometry, ColumnLayout);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, layout) = (&self.0, self.1);
        let shape = match layout {
            ColumnLayout::PerSample => Shape::from((g.batch, g.col_rows(), g.col_len())),
            ColumnLayout::Folded => Shape::from((g.col_rows(), g.batch * g.col_len())),
        };
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(kernels::im2col(contiguous(v, l)?, g, layout)),
            CpuStorage::F64(v) => CpuStorage::F64(kernels::im2col(contiguous(v, l)?, g, layout)),
            _ => candle_core::bail!("unfold supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (g, layout) = (&self.0, self.1);
        let dims = (g.batch, g.channels, g.height, g.width);
        let out = match grad.dtype() {
            DType::F32 => Tensor::from_vec(kernels::col2im(&tensor_vec::<f32>(grad)?, g, layout), dims, arg.device())?,
            DType::F64 => Tensor::from_vec(kernels::col2im(&tensor_vec::<f64>(grad)?, g, layout), dims, arg.device())?,
            dt => candle_core::bail!("unfold backward: unsupported dtype {dt:?}"),
        };
        Ok(Some(out))
    }
}

fn unfold_with(x: &Tensor, kernel: usize, stride: usize, padding: usize, layout: ColumnLayout) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    if height + 2 * padding < kernel || width + 2 * padding < kernel || stride == 0 {
        return Err(Error::shape(format!(
            "kernel {kernel} (stride {stride}, padding {padding}) does not fit {height}x{width}"
        )));
    }
    let g = UnfoldGeometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
    };
    Ok(x.contiguous()?.apply_op1(Unfold(g, layout))?)
}

/// `N×C×H×W → N×(C·k·k)×(H_out·W_out)` patch columns.
pub fn unfold(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    unfold_with(x, kernel, stride, padding, ColumnLayout::PerSample)
}

/// `N×C×H×W → (C·k·k)×(N·H_out·W_out)`: the batch folded into the columns,
/// ready for a single weight matmul.
pub fn unfold_batched(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    unfold_with(x, kernel, stride, padding, ColumnLayout::Folded)
}

struct DeformUnfold(DeformGeometry);

impl CustomOp2 for DeformUnfold {
    fn name(&self) -> &'static str {
        "deform-unfold"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.channels * g.taps(), g.height * g.width));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(o)) => {
                CpuStorage::F32(kernels::deform_im2col(contiguous(x, l1)?, contiguous(o, l2)?, g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(o)) => {
                CpuStorage::F64(kernels::deform_im2col(contiguous(x, l1)?, contiguous(o, l2)?, g))
            }
            _ => candle_core::bail!("deform-unfold needs matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        off: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = &self.0;
        let xd = x.dims().to_vec();
        let od = off.dims().to_vec();
        let (gx, go) = match grad.dtype() {
            DType::F32 => {
                let (a, b) = kernels::deform_im2col_backward(
                    &tensor_vec::<f32>(x)?,
                    &tensor_vec::<f32>(off)?,
                    &tensor_vec::<f32>(grad)?,
                    g,
                );
                (Tensor::from_vec(a, xd, x.device())?, Tensor::from_vec(b, od, x.device())?)
            }
            DType::F64 => {
                let (a, b) = kernels::deform_im2col_backward(
                    &tensor_vec::<f64>(x)?,
                    &tensor_vec::<f64>(off)?,
                    &tensor_vec::<f64>(grad)?,
                    g,
                );
                (Tensor::from_vec(a, xd, x.device())?, Tensor::from_vec(b, od, x.device())?)
            }
            dt => candle_core::bail!("deform-unfold backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(go)))
    }
}

/// Deformable patch columns `N×(C·k·k)×(H·W)` sampled at offset positions.
pub fn deform_unfold(x: &Tensor, offsets: &Tensor, kernel: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let expected = [batch, 2 * kernel * kernel, height, width];
    if offsets.dims() != expected {
        return Err(Error::shape(format!(
            "offset field {:?} does not match {expected:?}",
            offsets.dims()
        )));
    }
    if offsets.dtype() != x.dtype() {
        return Err(Error::shape("offsets and input must share a dtype"));
    }
    let g = DeformGeometry {
        batch,
        channels,
        height,
        width,
        kernel,
    };
    Ok(x.contiguous()?.apply_op2(&offsets.contiguous()?, DeformUnfold(g))?)
}
