//! Average fusion of sampled backgrounds at an intermediate diffusion step.
//!
//! A principal reverse trajectory supplies the foreground at step `k`; `n`
//! further trajectories supply backgrounds at the same step. The fused latent
//!
//! ```text
//! r'_k = (w1 / n) * sum_i bg (x) r_k^(i) + w2 * fg (x) r_k
//! ```
//!
//! is then denoised the rest of the way to give `r'`.

use crate::denoiser::{Conditioning, DenoiserModel};
use crate::error::{Error, Result};
use crate::frame::{FrameShape, LatentFrame};
use crate::parallel;
use crate::sampler::{denoise_range, SigmaPolicy};
use crate::schedule::NoiseSchedule;
use crate::seeding;
use crate::segmentation::{apply_mask, MaskPair, Segmenter};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Number of background trajectories.
    pub n: usize,
    /// Fusion step.
    pub k: usize,
    /// Background weight.
    pub w1: f64,
    /// Foreground weight.
    pub w2: f64,
}

impl FusionConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "need at least one background sample"));
        }
        if self.k == 0 || self.k > steps {
            return Err(Error::invalid("k", format!("{} not in [1, {steps}]", self.k)));
        }
        if !self.w1.is_finite() || !self.w2.is_finite() {
            return Err(Error::invalid("w1/w2", "weights must be finite"));
        }
        Ok(())
    }
}

/// Step-`k` latent of one seeded reverse trajectory started from `x_T ~ N(0, I)`.
pub fn sample_to_step(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    cond: &Conditioning,
    seed: u64,
    k: usize,
    sigma: SigmaPolicy,
) -> Result<LatentFrame> {
    sched.check_time(k)?;
    let mut rng = seeding::stream(seed, "trajectory", 0);
    let x_t = LatentFrame::gaussian(model.config().frame, &mut rng);
    denoise_range(model, sched, x_t, sched.steps(), k, cond, sigma, &mut rng)
}

/// Weighted recombination of masked backgrounds and the masked foreground.
pub fn average_fuse(
    bg_samples: &[LatentFrame],
    fg_frame: &LatentFrame,
    masks: &MaskPair,
    cfg: &FusionConfig,
) -> Result<LatentFrame> {
    if bg_samples.len() != cfg.n {
        return Err(Error::invalid(
            "bg_samples",
            format!("got {} samples, config expects n = {}", bg_samples.len(), cfg.n),
        ));
    }
    let mut bg_sum = LatentFrame::zeros(fg_frame.shape());
    for sample in bg_samples {
        bg_sum.add_scaled(&apply_mask(sample, masks.bg())?, 1.0)?;
    }
    let fg = apply_mask(fg_frame, masks.fg())?;
    bg_sum.lin_comb(cfg.w1 / cfg.n as f64, &fg, cfg.w2)
}

/// Denoise a fused step-`k` latent down to step 0. `k = 0` returns the input.
pub fn resume_denoise(
    fused: &LatentFrame,
    k: usize,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    cond: &Conditioning,
    sigma: SigmaPolicy,
    seed: u64,
) -> Result<LatentFrame> {
    sched.check_time(k)?;
    let mut rng = seeding::stream(seed, "resume", 0);
    denoise_range(model, sched, fused.clone(), k, 0, cond, sigma, &mut rng)
}

/// Where fusion masks come from.
pub enum MaskSource<'a> {
    /// Segment the principal trajectory's clean output.
    Segment(&'a dyn Segmenter),
    /// Use fixed masks.
    Fixed(MaskPair),
}

/// Everything produced by one fusion run.
#[derive(Debug, Clone)]
pub struct FusionOutcome {
    /// Principal trajectory at step `k`.
    pub principal_k: LatentFrame,
    /// Principal trajectory continued to step 0 without fusion.
    pub principal_0: LatentFrame,
    pub backgrounds_k: Vec<LatentFrame>,
    pub masks: MaskPair,
    pub fused_k: LatentFrame,
    /// Fused latent denoised to step 0.
    pub r_prime: LatentFrame,
}

/// Full fusion stage: sample, segment, fuse at `k`, and resume.
pub fn run_fusion(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    cond: &Conditioning,
    cfg: &FusionConfig,
    masks: MaskSource<'_>,
    sigma: SigmaPolicy,
    seed: u64,
) -> Result<FusionOutcome> {
    cfg.validate(sched.steps())?;
    sigma.validate()?;
    let principal_seed = seeding::derive_seed(seed, "fusion/principal", 0);
    let principal_k = sample_to_step(model, sched, cond, principal_seed, cfg.k, sigma)?;
    let principal_0 = resume_denoise(&principal_k, cfg.k, model, sched, cond, sigma, principal_seed)?;

    let backgrounds_k = parallel::map_indexed(cfg.n, |i| {
        let s = seeding::derive_seed(seed, "fusion/background", i as u64);
        sample_to_step(model, sched, cond, s, cfg.k, sigma)
    })?;

    let masks = match masks {
        MaskSource::Segment(seg) => seg.segment(&principal_0)?,
        MaskSource::Fixed(m) => m,
    };
    check_mask_shape(&masks, principal_k.shape())?;
    let fused_k = average_fuse(&backgrounds_k, &principal_k, &masks, cfg)?;
    let r_prime = resume_denoise(&fused_k, cfg.k, model, sched, cond, sigma, principal_seed)?;
    Ok(FusionOutcome {
        principal_k,
        principal_0,
        backgrounds_k,
        masks,
        fused_k,
        r_prime,
    })
}

fn check_mask_shape(masks: &MaskPair, shape: FrameShape) -> Result<()> {
    if masks.height() != shape.height || masks.width() != shape.width {
        return Err(Error::shape(
            format!("{}x{} masks", shape.height, shape.width),
            format!("{}x{}", masks.height(), masks.width()),
        ));
    }
    Ok(())
}
