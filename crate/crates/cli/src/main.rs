//! `wmrl` command-line front end.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use wmrl::agent::{save_frame_grid, train, Agent, RunDir};
use wmrl::config::TrainConfig;

/// Exit status for usage and configuration errors.
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "wmrl", version, about = "Train and inspect latent world-model agents on pixel tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint with mode actions.
    Eval(EvalArgs),
    /// Decode context frames and an imagined continuation into an image grid.
    Dream(DreamArgs),
    /// Report the per-channel spread of normalised encoder features.
    Diagnose(DiagnoseArgs),
    /// Render metrics files into SVG curves.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; `presets/name` resolves to `presets/name.toml`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` config override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories that are not given explicitly.
    #[arg(long, env = "WMRL_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
}

#[derive(Args)]
struct Source {
    /// Checkpoint file to load.
    #[arg(long, conflicts_with = "run_dir")]
    checkpoint: Option<PathBuf>,
    /// Run directory; its latest checkpoint is loaded.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// `key=value` override applied to the stored config.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Evaluation seed; defaults to the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Source {
    fn checkpoint_path(&self) -> anyhow::Result<PathBuf> {
        match (&self.checkpoint, &self.run_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(RunDir { root: dir.clone() }.latest_checkpoint()),
            (None, None) => bail!(UsageError("one of --checkpoint or --run-dir is required".into())),
        }
    }

    fn load(&self) -> anyhow::Result<(Agent, u64)> {
        let path = self.checkpoint_path()?;
        let agent = Agent::load(&path, &self.overrides).with_context(|| format!("loading {}", path.display()))?;
        let seed = self.seed.unwrap_or(agent.cfg.seed);
        Ok((agent, seed))
    }

    /// Where media files go: the run's `media/` or next to the checkpoint.
    fn media_dir(&self) -> anyhow::Result<PathBuf> {
        let dir = match (&self.run_dir, &self.checkpoint) {
            (Some(run), _) => run.join("media"),
            (None, Some(ckpt)) => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
            (None, None) => bail!(UsageError("one of --checkpoint or --run-dir is required".into())),
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
}

#[derive(Args)]
struct DreamArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 5)]
    context: usize,
    #[arg(long, default_value_t = 59)]
    horizon: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    source: Source,
    /// Observations to collect; at least 64.
    #[arg(long, default_value_t = 256)]
    samples: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics files or run directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory for the SVG files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.chain().any(|e| {
                e.is::<UsageError>() || matches!(e.downcast_ref::<wmrl::Error>(), Some(wmrl::Error::Config(_)))
            });
            ExitCode::from(if usage { USAGE } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => {
            let (agent, seed) = args.source.load()?;
            let report = agent.evaluate(args.episodes, seed)?;
            println!("episodes {}", report.returns.len());
            println!("mean {:.4}", report.mean);
            println!("median {:.4}", report.median);
            println!("returns {}", serde_json::to_string(&report.returns)?);
            Ok(())
        }
        Command::Dream(args) => {
            let (agent, seed) = args.source.load()?;
            let dream = agent.dream(args.context, args.horizon, seed)?;
            let dir = args.source.media_dir()?;
            let grid = dir.join("dream.png");
            save_frame_grid(&dream.frames, 16, &grid)?;
            save_frame_grid(&dream.observed, dream.observed.len(), &dir.join("dream_context.png"))?;
            let latents = dir.join("dream_latents.json");
            std::fs::write(&latents, serde_json::to_vec(&dream.latents)?)
                .with_context(|| format!("writing {}", latents.display()))?;
            println!("frames {} (context {}, imagined {})", dream.frames.len(), dream.context, args.horizon);
            println!("grid {}", grid.display());
            println!("latents {}", latents.display());
            Ok(())
        }
        Command::Diagnose(args) => {
            let (agent, seed) = args.source.load()?;
            let report = agent.diagnose_collapse(args.samples, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Plot(args) => {
            let written = plot::render(&args.inputs, &args.out)?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let base = match &args.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    // Validate everything before touching the filesystem.
    let cfg = base.with_overrides(&overrides)?;
    let run_dir = args.run_dir.clone().unwrap_or_else(|| {
        let stem = args
            .config
            .as_deref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "default".into());
        args.run_root.join(format!("{stem}-seed{}", cfg.seed))
    });
    let summary = train(cfg, &run_dir)?;
    let c = summary.counters;
    println!("run {}", run_dir.display());
    println!("env_steps {} grad_steps {} episodes {}", c.env_steps, c.grad_steps, c.episodes);
    if let Some(eval) = summary.final_eval {
        println!("eval mean {:.4} median {:.4}", eval.mean, eval.median);
    }
    Ok(())
}
