//! Reverse-process driver shared by fusion and temporal generation.

use rand::Rng;

use crate::denoiser::{Conditioning, DenoiserModel, FramePosition};
use crate::error::{Error, Result};
use crate::frame::LatentFrame;
use crate::schedule::NoiseSchedule;

/// How `sigma_t` is chosen for each DDIM step.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaPolicy {
    /// `sigma_t = 0`: the reverse process is a pure function of `x_T`.
    #[default]
    Deterministic,
    /// `sigma_t = eta * sqrt(beta_tilde_t)` with `0 <= eta <= 1`.
    Eta { eta: f64 },
}

impl SigmaPolicy {
    pub fn validate(&self) -> Result<()> {
        if let SigmaPolicy::Eta { eta } = *self {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::invalid("eta", format!("{eta} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn sigma(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        match *self {
            SigmaPolicy::Deterministic => 0.0,
            SigmaPolicy::Eta { eta } => sched.ddim_sigma(t, eta),
        }
    }
}

/// Predict noise at `t` and take one DDIM step to `t - 1`. Fresh noise is
/// drawn from `rng` only when `sigma_t > 0`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<R: Rng + ?Sized>(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    xt: &LatentFrame,
    t: usize,
    cond: &Conditioning,
    position: Option<FramePosition>,
    sigma: SigmaPolicy,
    rng: &mut R,
) -> Result<LatentFrame> {
    let eps = model.predict_noise_at(xt, t, cond, position)?;
    let s = sigma.sigma(sched, t);
    let noise = (s > 0.0).then(|| LatentFrame::gaussian(xt.shape(), rng));
    let next = sched.ddim_step(xt, t, &eps, s, noise.as_ref())?;
    if !next.is_finite() {
        return Err(Error::NonFinite(format!("reverse step at t = {t} diverged")));
    }
    Ok(next)
}

/// Runs reverse steps from `from` down to `to` (`from >= to`).
#[allow(clippy::too_many_arguments)]
pub fn denoise_range<R: Rng + ?Sized>(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x: LatentFrame,
    from: usize,
    to: usize,
    cond: &Conditioning,
    sigma: SigmaPolicy,
    rng: &mut R,
) -> Result<LatentFrame> {
    sched.check_time(from)?;
    if to > from {
        return Err(Error::invalid("to", format!("{to} above start step {from}")));
    }
    let mut x = x;
    for t in (to + 1..=from).rev() {
        x = reverse_step(model, sched, &x, t, cond, None, sigma, rng)?;
    }
    Ok(x)
}
