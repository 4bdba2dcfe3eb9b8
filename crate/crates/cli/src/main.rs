use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cotune_core::pipeline::{self, PipelineConfig, RunOptions, Stage};
use cotune_core::{parallel, Error, MaskPair};

/// Consistency-tuned long-video diffusion on small synthetic latents.
#[derive(Debug, Parser)]
#[command(name = "cotune", version)]
struct Cli {
    /// Worker threads for fusion sampling and clip denoising.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Also write per-step latents under <output_dir>/intermediates.
    #[arg(long, global = true)]
    dump_intermediates: bool,

    /// Replace the config's top-level seed.
    #[arg(long, global = true, value_name = "N")]
    seed_override: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run setup, fuse, tune and generate in order.
    Run { config: PathBuf },
    /// Run one stage (setup | fuse | tune | generate) from persisted state.
    Stage { name: String, config: PathBuf },
    /// Print the consistency report of a video directory as JSON.
    Report {
        video_dir: PathBuf,
        /// Mask file for the foreground/background breakdown.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Print the default config as TOML.
    Defaults {
        /// Use T = 1000 and k = 995 instead of the desk-scale schedule.
        #[arg(long)]
        full_scale: bool,
    },
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        EXIT_CONFIG
    } else if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_OTHER
    }
}

fn load_config(path: &Path, cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    parallel::set_threads(cli.threads);
    let opts = RunOptions {
        dump_intermediates: cli.dump_intermediates,
    };
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(config, cli)?;
            let summary = pipeline::run_pipeline(&cfg, &opts)?;
            println!("output: {}", summary.output_dir.display());
            if let Some(loss) = summary.final_loss {
                println!("final training loss: {loss:.6e}");
            }
            println!("mean adjacent-frame difference: {:.6e}", summary.report.mean);
            if let Some(b) = summary.baseline {
                println!("unmerged baseline: {:.6e}", b.mean);
            }
        }
        Command::Stage { name, config } => {
            let stage = Stage::parse(name).ok_or_else(|| Error::Config {
                field: "stage".into(),
                reason: format!("unknown stage `{name}`; expected setup, fuse, tune or generate"),
            })?;
            let cfg = load_config(config, cli)?;
            pipeline::run_stage(&cfg, stage, &opts)?;
            println!("stage {stage} done: {}", cfg.paths.output_dir.display());
        }
        Command::Report { video_dir, masks } => {
            let (video, _) = pipeline::read_video(video_dir)?;
            let masks = masks
                .as_deref()
                .map(|p| MaskPair::load(p, Some(video.shape())))
                .transpose()?;
            let report = pipeline::compute_consistency(&video, masks.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Defaults { full_scale } => {
            let cfg = if *full_scale {
                PipelineConfig::full_scale()
            } else {
                PipelineConfig::default()
            };
            print!("{}", cfg.to_toml_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
