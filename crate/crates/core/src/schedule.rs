//! Diffusion-process arithmetic: the noise schedule, forward noising, one
//! reverse ancestral step and the closed-form clean-image estimate.
//!
//! Timesteps are 0-based; `t = 0` is the least noisy step.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<ScheduleTable> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTable {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Linear-in-`t` betas from `beta_start` to `beta_end`.
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<ScheduleTable> {
    if timesteps == 0 {
        return Err(Error::config("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|t| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    ScheduleTable::from_betas(betas)
}

impl ScheduleTable {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = (0..betas.len())
            .map(|t| {
                if t == 0 {
                    0.0
                } else {
                    (betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])).sqrt()
                }
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::domain(format!(
                "timestep {t} out of range [0, {})",
                self.len()
            )));
        }
        Ok(())
    }

    /// `log ᾱ` at a real-valued time in `[0, T − 1]`, linear between
    /// integer timesteps.
    pub fn log_alpha_bar_at(&self, t: f64) -> f64 {
        let last = (self.len() - 1) as f64;
        let t = t.clamp(0.0, last);
        let i = (t.floor() as usize).min(self.len() - 1);
        let frac = t - i as f64;
        let lo = self.alpha_bars[i].ln();
        if frac == 0.0 {
            return lo;
        }
        let hi = self.alpha_bars[i + 1].ln();
        lo + frac * (hi - lo)
    }

    /// `(α, σ) = (√ᾱ, √(1 − ᾱ))` at a real-valued time.
    pub fn signal_noise_at(&self, t: f64) -> (f64, f64) {
        let lab = self.log_alpha_bar_at(t);
        ((0.5 * lab).exp(), (0.5 * (-lab.exp()).ln_1p()).exp())
    }

    /// Half log signal-to-noise ratio `λ = log(α / σ)`, decreasing in `t`.
    pub fn lambda_at(&self, t: f64) -> f64 {
        let lab = self.log_alpha_bar_at(t);
        0.5 * lab - 0.5 * (-lab.exp()).ln_1p()
    }

    /// Inverse of [`Self::lambda_at`] by bisection, clamped to `[0, T − 1]`.
    pub fn time_for_lambda(&self, lambda: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, (self.len() - 1) as f64);
        if lambda >= self.lambda_at(lo) {
            return lo;
        }
        if lambda <= self.lambda_at(hi) {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.lambda_at(mid) > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`
    pub fn signal_noise(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, table: &ScheduleTable) -> Result<Tensor> {
    table.check_t(t)?;
    same_shape(x0, eps, "forward_diffuse")?;
    let (s, n) = table.signal_noise(t);
    Ok((x0.affine(s, 0.0)? + eps.affine(n, 0.0)?)?)
}

/// `x̂0 = (x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`
pub fn reconstruct_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, table: &ScheduleTable) -> Result<Tensor> {
    table.check_t(t)?;
    same_shape(x_t, eps_hat, "reconstruct_x0")?;
    let (s, n) = table.signal_noise(t);
    Ok(((x_t - eps_hat.affine(n, 0.0)?)?.affine(1.0 / s, 0.0))?)
}

/// One ancestral step `x_t → x_{t−1}`; `z` is ignored at `t = 0`.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    z: &Tensor,
    table: &ScheduleTable,
) -> Result<Tensor> {
    table.check_t(t)?;
    same_shape(x_t, eps_hat, "reverse_step")?;
    same_shape(x_t, z, "reverse_step noise")?;
    let alpha = table.alphas[t];
    let coef = (1.0 - alpha) / (1.0 - table.alpha_bars[t]).sqrt();
    let mean = (x_t - eps_hat.affine(coef, 0.0)?)?.affine(1.0 / alpha.sqrt(), 0.0)?;
    if t == 0 {
        return Ok(mean);
    }
    Ok((mean + z.affine(table.sigmas[t], 0.0)?)?)
}

/// `(B, 1, 1, 1)` column of per-sample coefficients matching `like`'s dtype.
fn per_sample(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let b = values.len();
    let mut shape = vec![b];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?
        .to_dtype(like.dtype())?
        .to_device(like.device())?)
}

fn check_batch(x: &Tensor, ts: &[usize], table: &ScheduleTable) -> Result<()> {
    if x.dims().first() != Some(&ts.len()) {
        return Err(Error::shape(format!(
            "batch of {:?} with {} timesteps",
            x.dims(),
            ts.len()
        )));
    }
    ts.iter().try_for_each(|&t| table.check_t(t))
}

/// Batched [`forward_diffuse`] with one timestep per leading-axis sample.
pub fn forward_diffuse_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    table: &ScheduleTable,
) -> Result<Tensor> {
    check_batch(x0, ts, table)?;
    same_shape(x0, eps, "forward_diffuse_batch")?;
    let s = per_sample(ts.iter().map(|&t| table.signal_noise(t).0).collect(), x0)?;
    let n = per_sample(ts.iter().map(|&t| table.signal_noise(t).1).collect(), x0)?;
    Ok((x0.broadcast_mul(&s)? + eps.broadcast_mul(&n)?)?)
}

/// Batched [`reconstruct_x0`]; differentiable with respect to `eps_hat`.
pub fn reconstruct_x0_batch(
    x_t: &Tensor,
    ts: &[usize],
    eps_hat: &Tensor,
    table: &ScheduleTable,
) -> Result<Tensor> {
    check_batch(x_t, ts, table)?;
    same_shape(x_t, eps_hat, "reconstruct_x0_batch")?;
    let inv_s = per_sample(ts.iter().map(|&t| 1.0 / table.signal_noise(t).0).collect(), x_t)?;
    let n = per_sample(ts.iter().map(|&t| table.signal_noise(t).1).collect(), x_t)?;
    Ok((x_t - eps_hat.broadcast_mul(&n)?)?.broadcast_mul(&inv_s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn toy() -> ScheduleTable {
        make_schedule(4, 0.1, 0.4).unwrap()
    }

    fn filled(v: f64) -> Tensor {
        Tensor::full(v, (3, 2, 2), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn hand_computed_alpha_bars() {
        let table = toy();
        for (a, b) in table.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in table.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let single = make_schedule(1, 0.1, 0.4).unwrap();
        assert!((single.alpha_bars()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn sigma_follows_posterior_variance() {
        let table = toy();
        assert_eq!(table.sigmas()[0], 0.0);
        let expected = (0.2f64 * (1.0 - 0.9) / (1.0 - 0.72)).sqrt();
        assert!((table.sigmas()[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_diffuse_examples() {
        let table = toy();
        let zero = forward_diffuse(&filled(0.0), 1, &filled(0.0), &table).unwrap();
        assert!(values(&zero).iter().all(|&v| v == 0.0));
        let out = forward_diffuse(&filled(1.0), 2, &filled(1.0), &table).unwrap();
        let expected = 0.504f64.sqrt() + 0.496f64.sqrt();
        assert!((expected - 1.414_203).abs() < 1e-6);
        assert!(values(&out).iter().all(|&v| (v - expected).abs() < 1e-12));
        let out = forward_diffuse(&filled(0.7), 0, &filled(0.0), &table).unwrap();
        assert!(values(&out).iter().all(|&v| (v - 0.9f64.sqrt() * 0.7).abs() < 1e-12));
        assert!(matches!(
            forward_diffuse(&filled(0.0), 4, &filled(0.0), &table),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn reconstruct_x0_examples() {
        let table = toy();
        let out = reconstruct_x0(&filled(1.0), 3, &filled(1.0), &table).unwrap();
        let expected = (1.0 - 0.6976f64.sqrt()) / 0.3024f64.sqrt();
        // Independently evaluated: 0.2996413121.
        assert!((expected - 0.299_641_312).abs() < 1e-8);
        assert!(values(&out).iter().all(|&v| (v - expected).abs() < 1e-12));
        let out = reconstruct_x0(&filled(0.5), 1, &filled(0.0), &table).unwrap();
        assert!(values(&out).iter().all(|&v| (v - 0.5 / 0.72f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn reverse_step_example() {
        let table = toy();
        let out = reverse_step(&filled(1.0), 1, &filled(1.0), &filled(0.0), &table).unwrap();
        let expected = (1.0 / 0.8f64.sqrt()) * (1.0 - 0.2 / 0.28f64.sqrt());
        // Independently evaluated: 0.6954568614.
        assert!((expected - 0.695_456_861).abs() < 1e-8);
        assert!(values(&out).iter().all(|&v| (v - expected).abs() < 1e-12));
        // t = 0 ignores z entirely.
        let a = reverse_step(&filled(0.3), 0, &filled(0.1), &filled(0.0), &table).unwrap();
        let b = reverse_step(&filled(0.3), 0, &filled(0.1), &filled(5.0), &table).unwrap();
        assert_eq!(values(&a), values(&b));
    }

    #[test]
    fn oracle_noise_chain_recovers_x0() {
        // Iterate the reverse chain with the true noise implied by a planted x0.
        let table = toy();
        let x0 = Tensor::new(&[[[0.5f64, -0.8], [1.0, -1.0]]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[[0.3f64, -1.2], [0.7, 2.0]]], &Device::Cpu).unwrap();
        let mut x = forward_diffuse(&x0, 3, &eps, &table).unwrap();
        let zero = x.zeros_like().unwrap();
        for t in (0..4).rev() {
            let (s, n) = table.signal_noise(t);
            let eps_t = ((&x - x0.affine(s, 0.0).unwrap()).unwrap().affine(1.0 / n, 0.0)).unwrap();
            x = reverse_step(&x, t, &eps_t, &zero, &table).unwrap();
        }
        let l1 = (x - &x0).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(l1 < 0.05, "L1 {l1}");
    }

    #[test]
    fn batched_forms_match_single() {
        let table = make_schedule(10, 1e-3, 0.2).unwrap();
        let x0 = Tensor::randn(0f32, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let eps = Tensor::randn(0f32, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let ts = [2, 7];
        let xt = forward_diffuse_batch(&x0, &ts, &eps, &table).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let single = forward_diffuse(&x0.get(i).unwrap(), t, &eps.get(i).unwrap(), &table).unwrap();
            let d = (single - xt.get(i).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap() < 1e-6);
        }
        let back = reconstruct_x0_batch(&xt, &ts, &eps, &table).unwrap();
        let d = (back - x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5);
    }

    #[test]
    fn continuous_time_agrees_at_integers_and_inverts() {
        let table = ScheduleConfig::default().build().unwrap();
        for t in [0usize, 1, 17, 500, 999] {
            let (a, s) = table.signal_noise(t);
            let (ac, sc) = table.signal_noise_at(t as f64);
            assert!((a - ac).abs() < 1e-12 && (s - sc).abs() < 1e-12);
            let lam = table.lambda_at(t as f64);
            assert!((lam - (a / s).ln()).abs() < 1e-9);
        }
        let mut prev = f64::INFINITY;
        for i in 0..=200 {
            let t = 999.0 * i as f64 / 200.0;
            let lam = table.lambda_at(t);
            assert!(lam < prev);
            prev = lam;
            assert!((table.time_for_lambda(lam) - t).abs() < 1e-6);
        }
    }
}
