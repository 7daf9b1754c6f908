use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rpsnet::harness::{parse_config, run_experiment_with, ExperimentConfig};
use rpsnet::trainer::Mode;

#[derive(Parser)]
#[command(name = "rpsnet", version, about = "Class-incremental learning with random path selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML file.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rpsnet,
    Finetune,
    Joint,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rpsnet => Mode::Rpsnet,
            ModeArg::Finetune => Mode::Finetune,
            ModeArg::Joint => Mode::Joint,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    /// Saturation threshold; replaces any fixed switch interval.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Suppress per-task progress lines.
    #[arg(long)]
    quiet: bool,
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(dir) = &args.out {
        cfg.output.dir = Some(dir.clone());
    }
    if let Some(e) = args.epochs {
        cfg.trainer.epochs = e;
    }
    if let Some(n) = args.candidates {
        cfg.trainer.candidates = n;
    }
    if let Some(th) = args.threshold {
        cfg.trainer.threshold = Some(th);
        cfg.trainer.switch_interval = None;
    }
    if let Some(g) = args.gamma {
        cfg.trainer.gamma = g;
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = parse_config(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    apply_overrides(&mut cfg, &args);
    cfg.validate().context("invalid configuration after command-line overrides")?;
    let out = cfg.output_dir();
    let quiet = args.quiet;
    let outcome = run_experiment_with(&cfg, &mut |r| {
        if !quiet {
            let mu = r.saturation.mu.map_or("NA".to_string(), |m| format!("{m:.3}"));
            eprintln!(
                "task {:>2}: avg {:.4}  switched {}  mu_sat {}  {:.1}s",
                r.task,
                r.metrics.average,
                u8::from(r.switched),
                mu,
                r.seconds
            );
        }
    })
    .with_context(|| format!("running {} experiment", cfg.mode.as_str()))?;
    let final_avg = outcome.table.final_average().unwrap_or(f64::NAN);
    println!(
        "{} final A_{} = {:.4}  paths = {}  output = {}",
        cfg.mode.as_str(),
        cfg.tasks,
        final_avg,
        outcome.distinct_paths,
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
    }
}
