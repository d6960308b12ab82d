use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use vip_cli::pipeline::{self, Artifacts};
use vip_cli::{exit_code, ExperimentConfig};
use vip_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vip", version, about = "Joint variational inference for many imaging inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import ground-truth images.
    Synth(Common),
    /// Simulate noisy measurements.
    Measure(Common),
    /// Train the shared generator and per-measurement posteriors.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Posterior means and samples from the trained checkpoint.
    Reconstruct(Common),
    /// TV-regularized and single-image decoder baselines.
    Baseline(Common),
    /// Score held-out cases against per-class generators.
    Select(Common),
    /// Compute metrics from the artifact tree.
    Report(Common),
    /// All stages of the configured experiment.
    Run(Common),
}

fn setup(c: &Common) -> Result<(ExperimentConfig, Artifacts)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::config(e.to_string()))?;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out or set output_dir"))?;
    let art = Artifacts::new(out)?;
    pipeline::echo_config(&cfg, &art)?;
    Ok((cfg, art))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => {
            let (cfg, art) = setup(&c)?;
            pipeline::synth(&cfg, &art)?;
        }
        Command::Measure(c) => {
            let (cfg, art) = setup(&c)?;
            pipeline::measure(&cfg, &art)?;
        }
        Command::Train { common, resume } => {
            let (cfg, art) = setup(&common)?;
            pipeline::train(&cfg, &art, resume.as_deref())?;
        }
        Command::Reconstruct(c) => {
            let (cfg, art) = setup(&c)?;
            pipeline::reconstruct(&cfg, &art)?;
        }
        Command::Baseline(c) => {
            let (cfg, art) = setup(&c)?;
            pipeline::baseline(&cfg, &art)?;
        }
        Command::Select(c) => {
            let (cfg, art) = setup(&c)?;
            pipeline::select(&cfg, &art)?;
        }
        Command::Report(c) => {
            let (cfg, art) = setup(&c)?;
            pipeline::report(&cfg, &art)?;
        }
        Command::Run(c) => {
            let (cfg, art) = setup(&c)?;
            pipeline::run(&cfg, art.root())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VIP_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
