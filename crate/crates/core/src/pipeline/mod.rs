//! Configuration, file formats, stage orchestration and reporting.

pub mod config;
pub mod io;
pub mod report;
pub mod run;

pub use config::PipelineConfig;
pub use io::{read_frame, read_video, write_frame, write_video, VideoManifest};
pub use report::{compute_consistency, ConsistencyReport, RegionBreakdown};
pub use run::{run_pipeline, run_stage, OutputLayout, RunOptions, RunSummary, Stage};
