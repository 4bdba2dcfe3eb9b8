//! Foreground/background-weighted fine-tuning of the denoiser.
//!
//! All three objectives share one residual `r = eps - eps_theta(x_t, t, h)`
//! at `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`:
//!
//! ```text
//! L1    = ||r||^2
//! L_fg  = ||M_fg (x) r||^2
//! L_bg  = ||M_bg (x) r||^2
//! L_tot = l1 L1 + l2 L_fg + l3 L_bg = sum_p (l1 + l2 M_fg + l3 M_bg)_p r_p^2
//! ```
//!
//! The last form (binary masks, so `M^2 = M`) is what the gradient code uses.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::denoiser::{Conditioning, DenoiserModel, LossTerm};
use crate::error::{Error, Result};
use crate::frame::LatentFrame;
use crate::schedule::NoiseSchedule;
use crate::seeding;
use crate::segmentation::{apply_mask, MaskGrid, MaskPair};

/// `lambda1` (unmasked), `lambda2` (foreground), `lambda3` (background).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid("lambda", "weights must be finite and nonnegative"));
        }
        if all.iter().all(|l| *l == 0.0) {
            return Err(Error::invalid("lambda", "at least one weight must be positive"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.lambda1 * c, self.lambda2 * c, self.lambda3 * c)
    }

    /// Elementwise weight on the squared residual.
    pub fn weight_frame(&self, masks: &MaskPair, channels: usize) -> LatentFrame {
        let fg = masks.fg().to_frame(channels);
        let bg = masks.bg().to_frame(channels);
        let (l1, l2, l3) = (self.lambda1, self.lambda2, self.lambda3);
        fg.zip_with(&bg, |f, b| l1 + l2 * f + l3 * b)
            .expect("mask shapes agree")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(
                "learning_rate",
                format!("{} must be positive", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// One `(x0, t, noise)` draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneSample {
    pub x0: LatentFrame,
    pub t: usize,
    pub noise: LatentFrame,
}

/// The three component losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub fg: f64,
    pub bg: f64,
    pub total: f64,
}

fn residual(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x0: &LatentFrame,
    t: usize,
    cond: &Conditioning,
    noise: &LatentFrame,
) -> Result<LatentFrame> {
    sched.check_step(t)?;
    let xt = sched.forward_jump(x0, t, noise)?;
    let pred = model.predict_noise(&xt, t, cond)?;
    noise.lin_comb(1.0, &pred, -1.0)
}

/// `||noise - eps_theta(x_t, t)||^2`.
pub fn loss_l1(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x0: &LatentFrame,
    t: usize,
    cond: &Conditioning,
    noise: &LatentFrame,
) -> Result<f64> {
    Ok(residual(model, sched, x0, t, cond, noise)?.squared_norm())
}

/// `||M (x) (noise - eps_theta(x_t, t))||^2`.
pub fn loss_masked(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x0: &LatentFrame,
    t: usize,
    cond: &Conditioning,
    noise: &LatentFrame,
    mask: &MaskGrid,
) -> Result<f64> {
    let r = residual(model, sched, x0, t, cond, noise)?;
    Ok(apply_mask(&r, mask)?.squared_norm())
}

/// All three losses on one shared draw, combined with `weights`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x0: &LatentFrame,
    t: usize,
    cond: &Conditioning,
    noise: &LatentFrame,
    masks: &MaskPair,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let r = residual(model, sched, x0, t, cond, noise)?;
    let l1 = r.squared_norm();
    let fg = apply_mask(&r, masks.fg())?.squared_norm();
    let bg = apply_mask(&r, masks.bg())?.squared_norm();
    Ok(LossBreakdown {
        l1,
        fg,
        bg,
        total: weights.lambda1 * l1 + weights.lambda2 * fg + weights.lambda3 * bg,
    })
}

/// Batch-mean loss breakdown and the exact gradient of the mean total loss.
pub fn loss_total_gradients(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    batch: &[TuneSample],
    cond: &Conditioning,
    masks: &MaskPair,
    weights: &LossWeights,
) -> Result<(LossBreakdown, crate::denoiser::Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let weight = weights.weight_frame(masks, model.config().frame.channels);
    let mut mean = LossBreakdown::default();
    let mut xts = Vec::with_capacity(batch.len());
    for s in batch {
        let b = loss_total(model, sched, &s.x0, s.t, cond, &s.noise, masks, weights)?;
        mean.l1 += b.l1;
        mean.fg += b.fg;
        mean.bg += b.bg;
        mean.total += b.total;
        xts.push(sched.forward_jump(&s.x0, s.t, &s.noise)?);
    }
    let n = batch.len() as f64;
    mean.l1 /= n;
    mean.fg /= n;
    mean.bg /= n;
    mean.total /= n;

    let terms: Vec<LossTerm<'_>> = batch
        .iter()
        .zip(&xts)
        .map(|(s, xt)| LossTerm {
            xt,
            t: s.t,
            cond,
            position: None,
            target: &s.noise,
            weight: Some(&weight),
        })
        .collect();
    let (_, grads) = model.loss_gradients(&terms)?;
    Ok((mean, grads))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<TrainRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "step\tl1\tl_fg\tl_bg\tl_total";

    /// Tab-separated table with [`TrainingLog::HEADER`] as its first line;
    /// floats use Rust's shortest round-trip formatting.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let l = r.losses;
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.step, l.l1, l.fg, l.bg, l.total);
        }
        s
    }

    pub fn from_tsv(text: &str, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format("training log", origin, reason);
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(format!("line {} has {} columns", i + 2, cols.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("bad number `{s}` on line {}", i + 2)))
            };
            records.push(TrainRecord {
                step: cols[0]
                    .parse()
                    .map_err(|_| bad(format!("bad step on line {}", i + 2)))?,
                losses: LossBreakdown {
                    l1: num(cols[1])?,
                    fg: num(cols[2])?,
                    bg: num(cols[3])?,
                    total: num(cols[4])?,
                },
            });
        }
        Ok(Self { records })
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.losses.total).collect()
    }
}

/// Draws the batch for one update: a target frame uniformly from `targets`,
/// `t` uniform on `[1, T]`, and standard normal noise.
pub fn draw_batch<R: Rng + ?Sized>(
    targets: &[LatentFrame],
    steps: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<TuneSample> {
    (0..batch_size)
        .map(|_| {
            let x0 = targets[rng.random_range(0..targets.len())].clone();
            let t = rng.random_range(1..=steps);
            let noise = LatentFrame::gaussian(x0.shape(), rng);
            TuneSample { x0, t, noise }
        })
        .collect()
}

/// Seeded SGD on the weighted total loss. Returns the tuned model and a
/// per-step log of batch-mean losses (measured before each update).
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    model: &DenoiserModel,
    targets: &[LatentFrame],
    cond: &Conditioning,
    masks: &MaskPair,
    sched: &NoiseSchedule,
    weights: &LossWeights,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<(DenoiserModel, TrainingLog)> {
    cfg.validate()?;
    weights.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("targets", "need at least one target frame"));
    }
    if let Some(f) = targets.iter().find(|f| !f.is_finite()) {
        return Err(Error::NonFinite(format!(
            "target frame of shape {} is not finite",
            f.shape()
        )));
    }
    let mut model = model.clone();
    let mut log = TrainingLog::default();
    let mut rng = seeding::stream(seed, "tune", 0);
    for step in 0..cfg.steps {
        let batch = draw_batch(targets, sched.steps(), cfg.batch_size, &mut rng);
        let (losses, grads) =
            loss_total_gradients(&model, sched, &batch, cond, masks, weights).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("fine-tune step {step}: {msg}")),
                other => other,
            })?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "fine-tune step {step}: loss {}",
                losses.total
            )));
        }
        log.records.push(TrainRecord { step, losses });
        model
            .apply_update(&grads, cfg.learning_rate)
            .map_err(|e| Error::NonFinite(format!("fine-tune step {step}: {e}")))?;
    }
    Ok((model, log))
}
