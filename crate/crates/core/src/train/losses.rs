use candle_core::{DType, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::GlyphImage;
use crate::schedule::{reconstruct_x0_batch, ScheduleTable};
use crate::scr::{style_contrastive_loss, StyleExtractor};

/// With probability `p` replaces both conditions by white images.
pub fn condition_dropout<R: Rng>(
    x_c: &GlyphImage,
    x_s: &GlyphImage,
    p: f64,
    rng: &mut R,
) -> Result<(GlyphImage, GlyphImage)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("dropout probability {p} outside [0, 1)")));
    }
    // Always draw, so the stream position does not depend on p.
    let u: f64 = rng.gen();
    if u < p {
        let (c, h, w) = x_c.dims();
        let (cs, hs, ws) = x_s.dims();
        Ok((GlyphImage::filled(c, h, w, 1.0), GlyphImage::filled(cs, hs, ws, 1.0)))
    } else {
        Ok((x_c.clone(), x_s.clone()))
    }
}

/// Per-component loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub cp: f64,
    pub offset: f64,
    pub sc: Option<f64>,
}

/// Loss weights used to recompose [`LossReport::total`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cp: f64,
    pub offset: f64,
    pub sc: f64,
}

impl LossReport {
    pub fn compose(mse: f64, cp: f64, offset: f64, sc: Option<f64>, w: LossWeights) -> Self {
        let mut total = mse + w.cp * cp + w.offset * offset;
        if let Some(sc) = sc {
            if w.sc != 0.0 {
                total += w.sc * sc;
            }
        }
        Self {
            total,
            mse,
            cp,
            offset,
            sc,
        }
    }
}

pub fn mean_squared_error(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Mean absolute value over every entry of every offset field.
pub fn offset_loss(offsets: &[Tensor]) -> Result<Tensor> {
    let count: usize = offsets.iter().map(|o| o.elem_count()).sum();
    if count == 0 {
        return Err(Error::shape("no offset entries"));
    }
    let mut sum: Option<Tensor> = None;
    for o in offsets {
        let s = o.abs()?.sum_all()?;
        sum = Some(match sum {
            Some(acc) => (acc + s)?,
            None => s,
        });
    }
    Ok(sum.expect("non-empty").affine(1.0 / count as f64, 0.0)?)
}

/// `Σ_l mean|F_l(x) − F_l(target)|` over frozen trunk features.
pub fn perceptual_loss(trunk: &StyleExtractor, layers: &[usize], x: &Tensor, target: &Tensor) -> Result<Tensor> {
    let fx = trunk.features(x, layers)?;
    let ft = trunk.features(target, layers)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(&ft) {
        let d = (a - b.detach())?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::config("perceptual loss needs at least one layer"))
}

/// Inputs of the contrastive term: positives are `B` images, negatives
/// `B·K` images grouped by sample.
pub struct ContrastTargets<'a> {
    pub positives: &'a Tensor,
    pub negatives: &'a Tensor,
    pub k: usize,
    pub layers: &'a [usize],
    pub tau: f64,
}

/// Contrastive loss of generated images against fixed positives/negatives.
pub fn contrastive_term(extractor: &StyleExtractor, generated: &Tensor, c: &ContrastTargets) -> Result<Tensor> {
    let b = generated.dim(0)?;
    let anchor = extractor.style_vectors(generated, c.layers)?;
    let positive: Vec<Tensor> = extractor
        .style_vectors(c.positives, c.layers)?
        .into_iter()
        .map(|v| v.detach())
        .collect();
    let negatives = extractor
        .style_vectors(c.negatives, c.layers)?
        .into_iter()
        .map(|v| {
            let d = v.dim(1)?;
            Ok(v.detach().reshape((b, c.k, d))?)
        })
        .collect::<Result<Vec<_>>>()?;
    style_contrastive_loss(&anchor, &positive, &negatives, c.tau)
}

/// Differentiable loss terms of one denoising step.
pub struct StepLosses {
    pub mse: Tensor,
    pub cp: Tensor,
    pub offset: Tensor,
    pub sc: Option<Tensor>,
    pub x0_hat: Tensor,
}

/// Everything a step's losses depend on besides the network.
pub struct StepOutputs<'a> {
    pub target: &'a Tensor,
    pub x_t: &'a Tensor,
    pub ts: &'a [usize],
    pub eps: &'a Tensor,
    pub eps_hat: &'a Tensor,
    pub offsets: &'a [Tensor],
}

pub fn step_losses(
    table: &ScheduleTable,
    extractor: &StyleExtractor,
    cp_layers: &[usize],
    out: &StepOutputs,
    contrast: Option<&ContrastTargets>,
) -> Result<StepLosses> {
    let mse = mean_squared_error(out.eps_hat, out.eps)?;
    let x0_hat = reconstruct_x0_batch(out.x_t, out.ts, out.eps_hat, table)?;
    let cp = perceptual_loss(extractor, cp_layers, &x0_hat, out.target)?;
    let offset = offset_loss(out.offsets)?;
    let sc = contrast.map(|c| contrastive_term(extractor, &x0_hat, c)).transpose()?;
    Ok(StepLosses {
        mse,
        cp,
        offset,
        sc,
        x0_hat,
    })
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::schedule::{forward_diffuse_batch, make_schedule};
    use crate::scr::ScrConfig;
    use candle_core::Device;

    fn small_extractor() -> StyleExtractor {
        let cfg = ScrConfig {
            stage_widths: vec![8, 8, 8, 8],
            convs_per_stage: 1,
            proj_dim: 16,
        };
        StyleExtractor::new_frozen(cfg, DType::F32, 3).unwrap()
    }

    #[test]
    fn dropout_frequency_and_null_image() {
        let c = GlyphImage::filled(3, 8, 8, -0.5);
        let s = GlyphImage::filled(3, 8, 8, 0.25);
        let mut r = rng::stream(1, "dropout", 0);
        for _ in 0..100 {
            assert_eq!(condition_dropout(&c, &s, 0.0, &mut r).unwrap(), (c.clone(), s.clone()));
        }
        let p = 0.1;
        let n = 10_000;
        let mut dropped = 0;
        for _ in 0..n {
            let (c2, s2) = condition_dropout(&c, &s, p, &mut r).unwrap();
            let white_c = c2.data().iter().all(|&v| v == 1.0);
            let white_s = s2.data().iter().all(|&v| v == 1.0);
            assert_eq!(white_c, white_s, "conditions drop together");
            dropped += white_c as usize;
        }
        assert!((dropped as f64 / n as f64 - p).abs() < 0.02);
        let p = 1.0 - 1e-9;
        assert!((0..100).all(|_| condition_dropout(&c, &s, p, &mut r).unwrap().0.data().iter().all(|&v| v == 1.0)));
        assert!(condition_dropout(&c, &s, 1.0, &mut r).is_err());
    }

    #[test]
    fn offset_loss_values() {
        let dev = Device::Cpu;
        let zeros = [Tensor::zeros((1, 18, 4, 4), DType::F32, &dev).unwrap()];
        assert_eq!(scalar(&offset_loss(&zeros).unwrap()).unwrap(), 0.0);
        let c = [
            Tensor::full(-0.75f32, (2, 18, 2, 2), &dev).unwrap(),
            Tensor::full(0.75f32, (2, 18, 4, 4), &dev).unwrap(),
        ];
        assert!((scalar(&offset_loss(&c).unwrap()).unwrap() - 0.75).abs() < 1e-7);
    }

    #[test]
    fn oracle_noise_gives_zero_reconstruction_losses() {
        let dev = Device::Cpu;
        let table = make_schedule(100, 1e-4, 0.02).unwrap();
        let target = Tensor::rand(-1f32, 1.0, (2, 3, 16, 16), &dev).unwrap();
        let eps = Tensor::randn(0f32, 1.0, (2, 3, 16, 16), &dev).unwrap();
        let ts = [3, 90];
        let x_t = forward_diffuse_batch(&target, &ts, &eps, &table).unwrap();
        let offsets = [Tensor::zeros((2, 18, 4, 4), DType::F32, &dev).unwrap()];
        let ex = small_extractor();
        let out = StepOutputs {
            target: &target,
            x_t: &x_t,
            ts: &ts,
            eps: &eps,
            eps_hat: &eps,
            offsets: &offsets,
        };
        let l = step_losses(&table, &ex, &[0, 1, 2], &out, None).unwrap();
        assert_eq!(scalar(&l.mse).unwrap(), 0.0);
        assert!(scalar(&l.cp).unwrap() < 1e-4);
        assert_eq!(scalar(&l.offset).unwrap(), 0.0);
        assert!(l.sc.is_none());
    }

    #[test]
    fn report_recomposes() {
        let w = LossWeights { cp: 0.01, offset: 0.5, sc: 0.01 };
        let r = LossReport::compose(0.3, 2.0, 0.1, Some(4.0), w);
        assert_eq!(r.total, 0.3 + 0.01 * 2.0 + 0.5 * 0.1 + 0.01 * 4.0);
        let z = LossReport::compose(0.3, 2.0, 0.1, Some(4.0), LossWeights { sc: 0.0, ..w });
        assert_eq!(z.total, LossReport::compose(0.3, 2.0, 0.1, None, w).total);
    }
}
