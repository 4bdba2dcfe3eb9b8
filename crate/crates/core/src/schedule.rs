//! Noise schedule tables and the closed-form diffusion steps built on them.
//!
//! Timesteps are 1-based: `t = 1..=T` indexes the diffusion steps and `t = 0`
//! denotes clean data, with the cumulative product at `t = 0` fixed to 1.
//! Every function here is pure.

use crate::error::{Error, Result};
use crate::frame::LatentFrame;

/// Per-step variance tables for a `T`-step diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
}

impl NoiseSchedule {
    /// Scaled-linear schedule: interpolate linearly between `sqrt(beta_start)`
    /// and `sqrt(beta_end)` over `T` steps, then square.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !(beta_start.is_finite() && beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::invalid("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end.is_finite() && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::invalid("beta_end", format!("{beta_end} not in (0, 1)")));
        }
        if beta_start > beta_end {
            return Err(Error::invalid(
                "beta_start",
                format!("{beta_start} exceeds beta_end {beta_end}"),
            ));
        }

        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let betas = (0..steps)
            .map(|i| {
                if i == 0 {
                    beta_start
                } else if i == steps - 1 {
                    beta_end
                } else {
                    let u = i as f64 / (steps - 1) as f64;
                    let s = lo + u * (hi - lo);
                    s * s
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds the derived tables from an explicit variance sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("betas", "empty schedule"));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid("betas", format!("{b} not in (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let beta_tildes = betas
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * b
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            beta_tildes,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
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

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tildes
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t - 1]
    }

    /// Checks `1 <= t <= T`.
    pub fn check_step(&self, t: usize) -> Result<()> {
        self.check_range(t, 1)
    }

    /// Checks `0 <= t <= T`.
    pub fn check_time(&self, t: usize) -> Result<()> {
        self.check_range(t, 0)
    }

    fn check_range(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// One forward noising step: `sqrt(alpha_t) x_{t-1} + sqrt(beta_t) noise`.
    pub fn forward_step(&self, x_prev: &LatentFrame, t: usize, noise: &LatentFrame) -> Result<LatentFrame> {
        self.check_step(t)?;
        x_prev.lin_comb(self.alpha(t).sqrt(), noise, self.beta(t).sqrt())
    }

    /// Jump straight from clean data to step `t`:
    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`. `t = 0` returns `x0`.
    pub fn forward_jump(&self, x0: &LatentFrame, t: usize, noise: &LatentFrame) -> Result<LatentFrame> {
        self.check_time(t)?;
        let ab = self.alpha_bar(t);
        x0.lin_comb(ab.sqrt(), noise, (1.0 - ab).sqrt())
    }

    /// Mean of the forward-process posterior `q(x_{t-1} | x_t, x_0)`; the
    /// matching variance is [`NoiseSchedule::beta_tilde`].
    pub fn posterior_mean(&self, x0: &LatentFrame, xt: &LatentFrame, t: usize) -> Result<LatentFrame> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        x0.lin_comb(c0, xt, ct)
    }

    /// Clean-data estimate `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
    pub fn predict_x0(&self, xt: &LatentFrame, eps_pred: &LatentFrame, t: usize) -> Result<LatentFrame> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        xt.zip_with(eps_pred, |x, e| (x - n * e) / s)
    }

    /// Standard deviation for an `eta`-scaled DDIM step at `t`:
    /// `eta * sqrt(beta_tilde_t)`. `eta = 0` is deterministic DDIM, `eta = 1`
    /// matches the DDPM posterior variance.
    pub fn ddim_sigma(&self, t: usize, eta: f64) -> f64 {
        eta * self.beta_tilde(t).sqrt()
    }

    /// One reverse DDIM step from `x_t` to `x_{t-1}`.
    ///
    /// `extra_noise` is only read when `sigma > 0`.
    pub fn ddim_step(
        &self,
        xt: &LatentFrame,
        t: usize,
        eps_pred: &LatentFrame,
        sigma: f64,
        extra_noise: Option<&LatentFrame>,
    ) -> Result<LatentFrame> {
        self.check_step(t)?;
        let ab_prev = self.alpha_bar(t - 1);
        let var = sigma * sigma;
        if !(sigma >= 0.0 && var <= 1.0 - ab_prev) {
            return Err(Error::invalid(
                "sigma",
                format!("sigma^2 = {var} outside [0, 1 - abar_(t-1) = {}]", 1.0 - ab_prev),
            ));
        }
        let x0_hat = self.predict_x0(xt, eps_pred, t)?;
        let mut out = x0_hat.lin_comb(ab_prev.sqrt(), eps_pred, (1.0 - ab_prev - var).sqrt())?;
        if sigma > 0.0 {
            let noise = extra_noise.ok_or_else(|| Error::invalid("extra_noise", "required when sigma > 0"))?;
            out.add_scaled(noise, sigma)?;
        }
        Ok(out)
    }
}
