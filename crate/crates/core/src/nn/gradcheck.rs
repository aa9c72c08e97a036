use candle_core::{DType, Tensor, Var};

use crate::error::Result;

/// Compares the autodiff gradient of `loss` w.r.t. selected entries of `var`
/// with central differences; returns the worst `|g − fd| / max(|g|, |fd|, floor)`.
///
/// `loss` must read `var` through its shared storage (directly or via
/// modules built from a `ParamStore`) and return a scalar.
pub fn max_relative_error(
    var: &Var,
    loss: impl Fn() -> Result<Tensor>,
    indices: &[usize],
    step: f64,
    floor: f64,
) -> Result<f64> {
    let dims = var.dims().to_vec();
    let dtype = var.dtype();
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let grads = loss()?.backward()?;
    let analytic: Vec<f64> = match grads.get(var) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        None => vec![0.0; var.elem_count()],
    };
    let base: Vec<f64> = var.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let set = |vals: &[f64]| -> Result<()> {
        let t = Tensor::from_vec(vals.to_vec(), dims.as_slice(), var.device())?.to_dtype(dtype)?;
        var.set(&t)?;
        Ok(())
    };
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for &i in indices {
        probe[i] = base[i] + step;
        set(&probe)?;
        let plus = scalar(loss()?)?;
        probe[i] = base[i] - step;
        set(&probe)?;
        let minus = scalar(loss()?)?;
        probe[i] = base[i];
        let fd = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    set(&base)?;
    Ok(worst)
}
