//! Stage orchestration.
//!
//! Output directory layout:
//!
//! ```text
//! <output_dir>/
//!   config.toml              resolved config (setup)
//!   schedule.tsv             t, beta_t, alpha_bar_t (setup)
//!   model_base.ctdm          initial denoiser (setup)
//!   fusion/                  principal_k, principal_0, fused_k, r_prime (.ctf + .png), masks.ctmask
//!   model_tuned.ctdm         fine-tuned denoiser (tune)
//!   training_log.tsv         per-step losses (tune)
//!   video/                   merged long video + manifest.json (generate)
//!   report.json              consistency of video/ (generate)
//!   baseline/                unmerged video, manifest.json, report.json (generate, optional)
//!   intermediates/           only with dump_intermediates
//! ```
//!
//! Each stage reads only what earlier stages persisted, so any stage can be
//! re-run alone and reproduces its outputs.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::denoiser::{Conditioning, DenoiserModel};
use crate::error::{Error, Result};
use crate::frame::LatentFrame;
use crate::fusion::{run_fusion, MaskSource};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::io::{read_frame, write_frame, write_frame_with_preview, write_video};
use crate::pipeline::report::{compute_consistency, ConsistencyReport};
use crate::seeding::{derive_seed, embed_text};
use crate::segmentation::{MaskPair, ThresholdSegmenter};
use crate::temporal::{generate_long_video_with, generate_unmerged_video};
use crate::tuning::fine_tune;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Setup,
    Fuse,
    Tune,
    Generate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Setup, Stage::Fuse, Stage::Tune, Stage::Generate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Setup => "setup",
            Stage::Fuse => "fuse",
            Stage::Tune => "tune",
            Stage::Generate => "generate",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub dump_intermediates: bool,
}

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn schedule(&self) -> PathBuf {
        self.root.join("schedule.tsv")
    }
    pub fn base_model(&self) -> PathBuf {
        self.root.join("model_base.ctdm")
    }
    pub fn fusion_dir(&self) -> PathBuf {
        self.root.join("fusion")
    }
    pub fn r_prime(&self) -> PathBuf {
        self.fusion_dir().join("r_prime.ctf")
    }
    pub fn masks(&self) -> PathBuf {
        self.fusion_dir().join("masks.ctmask")
    }
    pub fn tuned_model(&self) -> PathBuf {
        self.root.join("model_tuned.ctdm")
    }
    pub fn training_log(&self) -> PathBuf {
        self.root.join("training_log.tsv")
    }
    pub fn video_dir(&self) -> PathBuf {
        self.root.join("video")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn baseline_dir(&self) -> PathBuf {
        self.root.join("baseline")
    }
    pub fn intermediates(&self) -> PathBuf {
        self.root.join("intermediates")
    }
}

/// What a full run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub report: ConsistencyReport,
    pub baseline: Option<ConsistencyReport>,
    pub final_loss: Option<f64>,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn write_json<T: serde::Serialize>(p: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(p, &(text + "\n"))
}

/// Prompt/condition embeddings for fusion and tuning.
pub fn conditioning(cfg: &PipelineConfig) -> Conditioning {
    Conditioning::new(
        embed_text(&cfg.prompt, cfg.model.prompt_dim, cfg.seed),
        embed_text(&cfg.condition, cfg.model.condition_dim, cfg.seed),
    )
}

/// One conditioning per clip; clips without their own prompt use `prompt`.
pub fn clip_conditionings(cfg: &PipelineConfig, clips: usize) -> Vec<Conditioning> {
    let c = embed_text(&cfg.condition, cfg.model.condition_dim, cfg.seed);
    (0..clips)
        .map(|i| {
            let text = cfg.temporal.clip_prompts.get(i).unwrap_or(&cfg.prompt);
            Conditioning::new(embed_text(text, cfg.model.prompt_dim, cfg.seed), c.clone())
        })
        .collect()
}

fn tagged<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        // config errors keep their field name visible
        e @ Error::Config { .. } => e,
        e => Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        },
    })
}

/// Runs one stage from persisted state.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, opts: &RunOptions) -> Result<()> {
    cfg.validate()?;
    let out = OutputLayout::new(&cfg.paths.output_dir);
    tagged(
        stage,
        match stage {
            Stage::Setup => setup(cfg, &out),
            Stage::Fuse => fuse(cfg, &out, opts),
            Stage::Tune => tune(cfg, &out).map(|_| ()),
            Stage::Generate => generate(cfg, &out, opts).map(|_| ()),
        },
    )
}

/// Runs all four stages in order.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = OutputLayout::new(&cfg.paths.output_dir);
    tagged(Stage::Setup, setup(cfg, &out))?;
    tagged(Stage::Fuse, fuse(cfg, &out, opts))?;
    let final_loss = tagged(Stage::Tune, tune(cfg, &out))?;
    let (report, baseline) = tagged(Stage::Generate, generate(cfg, &out, opts))?;
    Ok(RunSummary {
        output_dir: out.root,
        report,
        baseline,
        final_loss,
    })
}

fn setup(cfg: &PipelineConfig, out: &OutputLayout) -> Result<()> {
    mkdir(&out.root)?;
    write_text(&out.config(), &cfg.to_toml_string())?;
    let sched = cfg.schedule()?;
    let mut tsv = String::from("t\tbeta\talpha_bar\n");
    for t in 1..=sched.steps() {
        tsv.push_str(&format!("{t}\t{:e}\t{:e}\n", sched.beta(t), sched.alpha_bar(t)));
    }
    write_text(&out.schedule(), &tsv)?;
    let init_seed = derive_seed(cfg.seed, "model", cfg.model.init);
    DenoiserModel::init(cfg.denoiser_config(), init_seed)?.save(&out.base_model())
}

fn load_model(cfg: &PipelineConfig, path: &Path) -> Result<DenoiserModel> {
    let model = DenoiserModel::load(path)?;
    if *model.config() != cfg.denoiser_config() {
        return Err(Error::format(
            "checkpoint",
            path,
            "architecture does not match the config; re-run the setup stage",
        ));
    }
    Ok(model)
}

fn fuse(cfg: &PipelineConfig, out: &OutputLayout, opts: &RunOptions) -> Result<()> {
    let sched = cfg.schedule()?;
    let model = load_model(cfg, &out.base_model())?;
    let segmenter = ThresholdSegmenter {
        threshold: cfg.fusion.threshold,
    };
    let masks = match &cfg.paths.mask_file {
        Some(p) => MaskSource::Fixed(MaskPair::load(p, Some(cfg.frame_shape()))?),
        None => MaskSource::Segment(&segmenter),
    };
    let outcome = run_fusion(
        &model,
        &sched,
        &conditioning(cfg),
        &cfg.fusion_config(),
        masks,
        cfg.fusion.sigma,
        derive_seed(cfg.seed, "fusion", 0),
    )?;
    let dir = out.fusion_dir();
    mkdir(&dir)?;
    write_frame_with_preview(&outcome.principal_k, &dir, "principal_k")?;
    write_frame_with_preview(&outcome.principal_0, &dir, "principal_0")?;
    write_frame_with_preview(&outcome.fused_k, &dir, "fused_k")?;
    write_frame_with_preview(&outcome.r_prime, &dir, "r_prime")?;
    outcome.masks.save(&out.masks())?;
    if opts.dump_intermediates {
        let idir = out.intermediates().join("fusion");
        mkdir(&idir)?;
        for (i, b) in outcome.backgrounds_k.iter().enumerate() {
            write_frame(b, &idir.join(format!("background_{i:03}.ctf")))?;
        }
    }
    Ok(())
}

fn tune(cfg: &PipelineConfig, out: &OutputLayout) -> Result<Option<f64>> {
    let sched = cfg.schedule()?;
    let model = load_model(cfg, &out.base_model())?;
    let r_prime: LatentFrame = read_frame(&out.r_prime())?;
    let masks = MaskPair::load(&out.masks(), Some(cfg.frame_shape()))?;
    let (tuned, log) = fine_tune(
        &model,
        std::slice::from_ref(&r_prime),
        &conditioning(cfg),
        &masks,
        &sched,
        &cfg.loss_weights(),
        &cfg.tune_config(),
        derive_seed(cfg.seed, "tune", 0),
    )?;
    write_text(&out.training_log(), &log.to_tsv())?;
    tuned.save(&out.tuned_model())?;
    Ok(log.records.last().map(|r| r.losses.total))
}

fn generate(
    cfg: &PipelineConfig,
    out: &OutputLayout,
    opts: &RunOptions,
) -> Result<(ConsistencyReport, Option<ConsistencyReport>)> {
    let sched = cfg.schedule()?;
    let model = load_model(cfg, &out.tuned_model())?;
    let plan = cfg.clip_plan()?;
    let conds = clip_conditionings(cfg, plan.count());
    let masks = match MaskPair::load(&out.masks(), Some(cfg.frame_shape())) {
        Ok(m) => Some(m),
        Err(Error::Io { .. }) => None,
        Err(e) => return Err(e),
    };
    let seed = derive_seed(cfg.seed, "generate", 0);
    let idir = out.intermediates().join("generate");
    if opts.dump_intermediates {
        mkdir(&idir)?;
    }
    let video = generate_long_video_with(&model, &sched, &plan, &conds, seed, cfg.temporal.sigma, |t, v| {
        if opts.dump_intermediates {
            for (j, f) in v.frames().iter().enumerate() {
                write_frame(f, &idir.join(format!("t{t:04}_frame{j:05}.ctf")))?;
            }
        }
        Ok(())
    })?;
    write_video(&video, Some(&plan), &out.video_dir())?;
    let report = compute_consistency(&video, masks.as_ref())?;
    write_json(&out.report(), &report)?;

    let baseline = if cfg.temporal.baseline {
        let unmerged = generate_unmerged_video(&model, &sched, &plan, &conds, seed, cfg.temporal.sigma)?;
        write_video(&unmerged, Some(&plan), &out.baseline_dir())?;
        let r = compute_consistency(&unmerged, masks.as_ref())?;
        write_json(&out.baseline_dir().join("report.json"), &r)?;
        Some(r)
    } else {
        None
    };
    Ok((report, baseline))
}
