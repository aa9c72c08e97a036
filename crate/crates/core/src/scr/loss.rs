use candle_core::{Tensor, D};

use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.07;

/// Layer-summed InfoNCE over unit style vectors, averaged over the batch:
/// `Σ_l −log(e^{a·p/τ} / (e^{a·p/τ} + Σ_i e^{a·n_i/τ}))`.
///
/// Per layer, `anchor` and `positive` are `B×d` and `negatives` is `B×K×d`.
pub fn style_contrastive_loss(anchor: &[Tensor], positive: &[Tensor], negatives: &[Tensor], tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    if anchor.is_empty() || anchor.len() != positive.len() || anchor.len() != negatives.len() {
        return Err(Error::shape(format!(
            "layer counts differ: {} anchors, {} positives, {} negative sets",
            anchor.len(),
            positive.len(),
            negatives.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((a, p), n) in anchor.iter().zip(positive).zip(negatives) {
        let (b, d) = a.dims2()?;
        let (bn, k, dn) = n.dims3()?;
        if p.dims() != [b, d] || (bn, dn) != (b, d) || k == 0 {
            return Err(Error::shape(format!(
                "anchor {:?}, positive {:?}, negatives {:?}",
                a.dims(),
                p.dims(),
                n.dims()
            )));
        }
        let pos = (a * p)?.sum_keepdim(1)?;
        let neg = n.matmul(&a.unsqueeze(2)?)?.squeeze(2)?;
        let logits = (Tensor::cat(&[&pos, &neg], 1)? / tau)?;
        let layer = (log_sum_exp(&logits)? - logits.narrow(1, 0, 1)?.squeeze(1)?)?;
        total = Some(match total {
            Some(t) => (t + layer)?,
            None => layer,
        });
    }
    Ok(total.expect("at least one layer").mean_all()?)
}

/// Row-wise `log Σ exp` over the last axis, stabilized by the row maximum.
pub fn log_sum_exp(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + max)?.squeeze(D::Minus1)?)
}
