//! Pipeline configuration (TOML).
//!
//! Every section and key is optional; missing values take the desk-scale
//! defaults below. Unknown keys are rejected. See the README for the full
//! grammar.

use std::path::{Path, PathBuf};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::frame::FrameShape;
use crate::fusion::FusionConfig;
use crate::sampler::SigmaPolicy;
use crate::schedule::NoiseSchedule;
use crate::temporal::{ClipPlan, ClipWeighting};
use crate::tuning::{LossWeights, TuneConfig};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream.
    pub seed: u64,
    /// Text prompt, embedded as `h`.
    pub prompt: String,
    /// Pose/condition description, embedded as `c`.
    pub condition: String,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub fusion: FusionSection,
    pub tune: TuneSection,
    pub temporal: TemporalSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub pos_dim: usize,
    /// Length of the prompt embedding `h`.
    pub prompt_dim: usize,
    /// Length of the condition embedding `c`.
    pub condition_dim: usize,
    /// Initialisation index; the init seed is derived from the top-level seed.
    pub init: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub n: usize,
    pub k: usize,
    pub w1: f64,
    pub w2: f64,
    /// Foreground is where the channel mean exceeds this value.
    pub threshold: f64,
    pub sigma: SigmaPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalSection {
    pub frames: usize,
    pub stride: usize,
    pub clip_len: usize,
    pub weighting: ClipWeighting,
    pub sigma: SigmaPolicy,
    /// Optional per-clip prompts; empty means every clip uses `prompt`.
    pub clip_prompts: Vec<String>,
    /// Also generate the unmerged per-frame baseline and report it.
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Relative paths are resolved against the config file's directory.
    pub output_dir: PathBuf,
    /// Fixed masks instead of segmenting the principal trajectory.
    pub mask_file: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt: "a person dancing on a beach".into(),
            condition: "pose sequence".into(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            fusion: FusionSection::default(),
            tune: TuneSection::default(),
            temporal: TemporalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 1,
            hidden: 32,
            time_dim: 8,
            pos_dim: 4,
            prompt_dim: 8,
            condition_dim: 8,
            init: 0,
        }
    }
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            n: 5,
            k: 45,
            w1: 1.0,
            w2: 1.0,
            threshold: 0.0,
            sigma: SigmaPolicy::Deterministic,
        }
    }
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            learning_rate: 2e-6,
            steps: 250,
            batch_size: 1,
        }
    }
}

impl Default for TemporalSection {
    fn default() -> Self {
        Self {
            frames: 6,
            stride: 2,
            clip_len: 4,
            weighting: ClipWeighting::Uniform,
            sigma: SigmaPolicy::Deterministic,
            clip_prompts: Vec::new(),
            baseline: true,
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            mask_file: None,
        }
    }
}

/// Re-labels an argument error from a module validator as a config error on
/// `section.name`.
fn in_section(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument { name, reason } => Error::Config {
            field: format!("{section}.{name}"),
            reason,
        },
        Error::TimestepOutOfRange { t, lo, hi } => Error::Config {
            field: section.to_string(),
            reason: format!("timestep {t} outside [{lo}, {hi}]"),
        },
        other => Error::Config {
            field: section.to_string(),
            reason: other.to_string(),
        },
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl PipelineConfig {
    /// T = 1000 schedule with fusion at k = 995, at desk-scale latent size.
    pub fn full_scale() -> Self {
        let mut cfg = Self::default();
        cfg.schedule.steps = 1000;
        cfg.fusion.k = 995;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "<document>".to_string());
            config_err(&field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.output_dir = base.join(&cfg.paths.output_dir);
        if let Some(m) = &cfg.paths.mask_file {
            cfg.paths.mask_file = Some(base.join(m));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().map_err(|e| in_section("schedule", e))?;
        self.denoiser_config().validate().map_err(|e| in_section("model", e))?;
        let steps = self.schedule.steps;
        self.fusion_config()
            .validate(steps)
            .map_err(|e| in_section("fusion", e))?;
        self.fusion
            .sigma
            .validate()
            .map_err(|e| in_section("fusion.sigma", e))?;
        if !self.fusion.threshold.is_finite() {
            return Err(config_err("fusion.threshold", "must be finite"));
        }
        self.loss_weights().validate().map_err(|e| in_section("tune", e))?;
        self.tune_config().validate().map_err(|e| in_section("tune", e))?;
        self.temporal
            .sigma
            .validate()
            .map_err(|e| in_section("temporal.sigma", e))?;
        let plan = self.clip_plan().map_err(|e| in_section("temporal", e))?;
        if self.temporal.frames < 2 {
            return Err(config_err("temporal.frames", "need at least two frames"));
        }
        if !self.temporal.clip_prompts.is_empty() && self.temporal.clip_prompts.len() != plan.count() {
            return Err(config_err(
                "temporal.clip_prompts",
                format!(
                    "{} prompts for {} clips",
                    self.temporal.clip_prompts.len(),
                    plan.count()
                ),
            ));
        }
        Ok(())
    }

    pub fn frame_shape(&self) -> FrameShape {
        FrameShape::new(self.model.height, self.model.width, self.model.channels)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::scaled_linear(s.steps, s.beta_start, s.beta_end)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            frame: self.frame_shape(),
            hidden: m.hidden,
            time_dim: m.time_dim,
            pos_dim: m.pos_dim,
            h_dim: m.prompt_dim,
            c_dim: m.condition_dim,
            steps: self.schedule.steps,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        let f = &self.fusion;
        FusionConfig {
            n: f.n,
            k: f.k,
            w1: f.w1,
            w2: f.w2,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::new(self.tune.lambda1, self.tune.lambda2, self.tune.lambda3)
    }

    pub fn tune_config(&self) -> TuneConfig {
        TuneConfig {
            steps: self.tune.steps,
            learning_rate: self.tune.learning_rate,
            batch_size: self.tune.batch_size,
        }
    }

    pub fn clip_plan(&self) -> Result<ClipPlan> {
        let t = &self.temporal;
        ClipPlan::new(
            t.frames,
            t.stride,
            t.clip_len,
            (self.model.height, self.model.width),
            &t.weighting,
        )
    }
}
