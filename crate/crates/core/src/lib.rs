//! Toy-scale co-tuning diffusion pipeline for long human videos.
//!
//! The crate follows the four-step flow: build a noise schedule and a small
//! denoiser, fuse a principal trajectory's foreground with averaged
//! backgrounds, fine-tune the denoiser on the fused frame with mask-weighted
//! losses, and generate a long video by co-denoising overlapping clips and
//! merging them at every step.

pub mod denoiser;
pub mod error;
pub mod frame;
pub mod fusion;
pub mod parallel;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod seeding;
pub mod segmentation;
pub mod temporal;
pub mod tuning;

pub use denoiser::{Conditioning, DenoiserConfig, DenoiserModel, FramePosition, Gradients, LossTerm};
pub use error::{Error, Result};
pub use frame::{FrameShape, LatentFrame};
pub use fusion::{run_fusion, FusionConfig, FusionOutcome, MaskSource};
pub use sampler::SigmaPolicy;
pub use schedule::NoiseSchedule;
pub use segmentation::{MaskGrid, MaskPair, Segmenter, ThresholdSegmenter};
pub use temporal::{ClipPlan, ClipWeighting, Video};
pub use tuning::{fine_tune, LossBreakdown, LossWeights, TrainingLog, TuneConfig};
