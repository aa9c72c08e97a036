use std::cell::Cell;

use candle_core::Tensor;

use crate::error::Result;
use crate::network::GlyphDiffusion;

/// Anything that predicts diffusion noise for a batch at real-valued times.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: &[f64], x_c: &Tensor, x_s: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for GlyphDiffusion {
    fn predict(&self, x_t: &Tensor, t: &[f64], x_c: &Tensor, x_s: &Tensor) -> Result<Tensor> {
        let t = Tensor::new(t, x_t.device())?;
        // Sampling never differentiates; detaching frees each step's graph.
        Ok(self.predict_noise(x_t, &t, x_c, x_s)?.eps.detach())
    }
}

/// Wraps a predictor and counts its evaluations.
pub struct CountingPredictor<P> {
    inner: P,
    calls: Cell<usize>,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<P> {
    fn predict(&self, x_t: &Tensor, t: &[f64], x_c: &Tensor, x_s: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(x_t, t, x_c, x_s)
    }
}

/// `(1 − s)·ε(x_t, t, ∅, ∅) + s·ε(x_t, t, x_c, x_s)` with ∅ the all-white
/// image. At `s = 1` the unconditional evaluation is skipped.
pub fn cfg_noise<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: &[f64],
    x_c: &Tensor,
    x_s: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let cond = model.predict(x_t, t, x_c, x_s)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    let white = x_c.ones_like()?;
    let uncond = model.predict(x_t, t, &white, &white)?;
    Ok((uncond.affine(1.0 - scale, 0.0)? + cond.affine(scale, 0.0)?)?)
}
