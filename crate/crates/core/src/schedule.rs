//! Noise schedule, sampler timestep grids and the DDIM / DDPM update rules.
//!
//! Timesteps run over `0..=T` with `T = 1000`. `t = 0` is the clean latent
//! (`ᾱ₀ = 1`); `t ≥ 1` uses the cumulative product of a linear beta schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const TRAIN_TIMESTEPS: u32 = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// `alphas_cumprod[t]` for `t` in `0..=T`; index 0 is exactly 1.
    alphas_cumprod: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(TRAIN_TIMESTEPS, BETA_START, BETA_END)
    }
}

impl NoiseSchedule {
    pub fn linear(train_timesteps: u32, beta_start: f64, beta_end: f64) -> Self {
        let n = train_timesteps as usize;
        let mut alphas_cumprod = Vec::with_capacity(n + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for i in 0..n {
            let beta = if n == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Self { alphas_cumprod }
    }

    pub fn max_timestep(&self) -> u32 {
        (self.alphas_cumprod.len() - 1) as u32
    }

    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        self.alphas_cumprod
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("timestep {t} outside schedule")))
    }

    fn check_pair(&self, t: u32, t_prev: u32) -> Result<(f64, f64)> {
        if t_prev >= t {
            return Err(Error::InvalidArgument(format!(
                "step must go backwards in time: {t} -> {t_prev}"
            )));
        }
        Ok((self.alpha_bar(t)?, self.alpha_bar(t_prev)?))
    }

    /// `√ᾱ_t · x₀ + √(1 − ᾱ_t) · ε`.
    pub fn add_noise(&self, x0: &Tensor, noise: &Tensor, t: u32) -> Result<Tensor> {
        x0.ensure_same_shape(noise, "add_noise")?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, n)| a * x + b * n)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// Clean-latent estimate implied by an ε prediction.
    pub fn predict_x0(&self, z_t: &Tensor, eps: &Tensor, t: u32) -> Result<Tensor> {
        z_t.ensure_same_shape(eps, "predict_x0")?;
        let ab = self.alpha_bar(t)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = z_t
            .data()
            .iter()
            .zip(eps.data())
            .map(|(z, e)| (z - sb * e) / sa)
            .collect();
        Tensor::new(z_t.shape().to_vec(), data)
    }

    /// ε implied by a clean-latent estimate; the inverse of [`predict_x0`](Self::predict_x0).
    ///
    /// At `t = 0` the noise level is zero and ε is undefined; the denominator
    /// is floored so the result stays finite.
    pub fn eps_from_x0(&self, z_t: &Tensor, x0: &Tensor, t: u32) -> Result<Tensor> {
        z_t.ensure_same_shape(x0, "eps_from_x0")?;
        let ab = self.alpha_bar(t)?;
        let sa = ab.sqrt();
        let sb = (1.0 - ab).max(1e-12).sqrt();
        let data = z_t
            .data()
            .iter()
            .zip(x0.data())
            .map(|(z, x)| (z - sa * x) / sb)
            .collect();
        Tensor::new(z_t.shape().to_vec(), data)
    }

    /// Deterministic DDIM update `z_t → z_{t_prev}`.
    pub fn ddim_step(&self, z_t: &Tensor, eps: &Tensor, t: u32, t_prev: u32) -> Result<Tensor> {
        let (_, ab_prev) = self.check_pair(t, t_prev)?;
        let x0 = self.predict_x0(z_t, eps, t)?;
        if t_prev == 0 {
            return Ok(x0);
        }
        let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| a * x + b * e)
            .collect();
        Tensor::new(z_t.shape().to_vec(), data)
    }

    /// Posterior mean of a (possibly strided) DDPM step.
    pub fn ddpm_mean(&self, z_t: &Tensor, eps: &Tensor, t: u32, t_prev: u32) -> Result<Tensor> {
        let (ab, ab_prev) = self.check_pair(t, t_prev)?;
        z_t.ensure_same_shape(eps, "ddpm_mean")?;
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let data = z_t
            .data()
            .iter()
            .zip(eps.data())
            .map(|(z, e)| inv * (z - coef * e))
            .collect();
        Tensor::new(z_t.shape().to_vec(), data)
    }

    /// Noise scale of a DDPM step, `σ² = 1 − ᾱ_t / ᾱ_prev`.
    ///
    /// This is the "fixed large" variance; it stays positive on the final
    /// step into `t = 0`, which edit-friendly inversion needs.
    pub fn ddpm_sigma(&self, t: u32, t_prev: u32) -> Result<f64> {
        let (ab, ab_prev) = self.check_pair(t, t_prev)?;
        Ok((1.0 - ab / ab_prev).sqrt())
    }

    /// `μ + σ·noise`.
    pub fn ddpm_step(
        &self,
        z_t: &Tensor,
        eps: &Tensor,
        noise: &Tensor,
        t: u32,
        t_prev: u32,
    ) -> Result<Tensor> {
        let mut mean = self.ddpm_mean(z_t, eps, t, t_prev)?;
        mean.ensure_same_shape(noise, "ddpm_step")?;
        let sigma = self.ddpm_sigma(t, t_prev)?;
        for (m, n) in mean.data_mut().iter_mut().zip(noise.data()) {
            *m += sigma * n;
        }
        Ok(mean)
    }
}

/// Classifier-free guidance `ε_u + s·(ε_c − ε_u)`; `s = 1` and `s = 0`
/// return the respective input exactly.
pub fn cfg(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_cond.ensure_same_shape(eps_uncond, "cfg")?;
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(c, u)| u + scale * (c - u))
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    Ddim { steps: u32 },
    Ddpm { steps: u32 },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Ddim { steps: 50 }
    }
}

impl Sampler {
    pub fn steps(&self) -> u32 {
        match *self {
            Sampler::Ddim { steps } | Sampler::Ddpm { steps } => steps,
        }
    }

    /// `(t, t_prev)` for every sampler step, from `T` down to `0`.
    pub fn timesteps(&self, max_t: u32) -> Result<Vec<(u32, u32)>> {
        let n = self.steps();
        if n == 0 || n > max_t {
            return Err(Error::Config(format!("{n} sampler steps over T={max_t}")));
        }
        let at = |k: u32| (max_t as u64 * (n - k) as u64 / n as u64) as u32;
        Ok((0..n).map(|k| (at(k), at(k + 1))).collect())
    }
}

/// Index of the sampler step whose timestep is closest to `target`
/// (earlier step on ties).
pub fn nearest_step(grid: &[(u32, u32)], target: u32) -> usize {
    let mut best = 0;
    for (k, &(t, _)) in grid.iter().enumerate() {
        if t.abs_diff(target) < grid[best].0.abs_diff(target) {
            best = k;
        }
    }
    best
}
