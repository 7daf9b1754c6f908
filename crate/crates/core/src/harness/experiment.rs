use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{emit_config, DatasetConfig, ExperimentConfig};
use super::metrics::{confusion_csv, emit_metrics, fmt_float, fmt_opt, MetricsTable, MetricsTableRow};
use super::{HarnessError, Result};
use crate::data::{ingest_idx, make_synthetic_stream, TaskStream};
use crate::path::Path;
use crate::trainer::{run_task, CandidateSummary, Mode, RunState, SwitchRule, TaskReport};

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Builds the task stream described by the dataset section.
pub fn load_stream(cfg: &ExperimentConfig) -> Result<TaskStream> {
    match &cfg.dataset {
        DatasetConfig::Mnist { dir } => {
            let train = ingest_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
            let test = ingest_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
            Ok(TaskStream::from_split(&train, &test, cfg.tasks, cfg.classes_per_task)?)
        }
        DatasetConfig::Synthetic { seed, .. } => {
            let spec = cfg.dataset.synthetic_spec().expect("synthetic dataset");
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.seed));
            Ok(make_synthetic_stream(cfg.tasks, cfg.classes_per_task, &spec, &mut rng)?)
        }
    }
}

/// Results of one run, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub table: MetricsTable,
    pub reports: Vec<TaskReport>,
    pub switches: Vec<usize>,
    pub distinct_paths: usize,
}

/// Runs every task of the configured mode on `stream`. `on_task` sees the
/// state after each task.
pub fn execute_on(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    on_task: &mut dyn FnMut(&RunState, &TaskReport) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let trainer = cfg.trainer_config();
    let mut state = RunState::new(cfg.network_config(), &trainer)?;
    let mut table = MetricsTable::new(cfg.tasks);
    let mut reports = Vec::with_capacity(cfg.tasks);
    for k in 1..=cfg.tasks {
        let report = run_task(&mut state, stream, k, &trainer)?;
        on_task(&state, &report)?;
        table.rows.push(MetricsTableRow {
            task: k,
            accuracy: report.metrics.task_accuracy.clone(),
            average: report.metrics.average,
            mu_sat: report.saturation.mu,
            switched: report.switched,
            seconds: cfg.output.record_wall_time.then_some(report.seconds),
        });
        reports.push(report);
    }
    Ok(RunOutcome {
        table,
        reports,
        switches: state.switches.entries().to_vec(),
        distinct_paths: state.selected_paths.len(),
    })
}

pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let stream = load_stream(cfg)?;
    execute_on(cfg, &stream, &mut |_, _| Ok(()))
}

fn with_mode(cfg: &ExperimentConfig, mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        ..cfg.clone()
    }
}

/// Single path, no freezing, no distillation, no exemplars.
pub fn run_baseline_finetune(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    Ok(execute(&with_mode(cfg, Mode::Finetune))?.table)
}

/// Retrains from the initial weights on all data of tasks `1..=k` at every
/// task `k`.
pub fn run_baseline_joint(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    Ok(execute(&with_mode(cfg, Mode::Joint))?.table)
}

#[derive(Serialize)]
struct PathsRecord<'a> {
    switches: &'a [usize],
    distinct_paths: usize,
    tasks: Vec<TaskPaths<'a>>,
}

#[derive(Serialize)]
struct TaskPaths<'a> {
    task: usize,
    switched: bool,
    train_path: &'a Path,
    inference_path: &'a Path,
    selected: usize,
    candidates: &'a [CandidateSummary],
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: &'a str,
    seed: u64,
    tasks: usize,
    classes_per_task: usize,
    final_average: f64,
    averages: Vec<f64>,
    switches: &'a [usize],
    distinct_paths: usize,
    phi: Vec<f64>,
    inference_macs_per_example: u64,
    train_macs: u64,
}

fn write(dir: &FsPath, name: &str, contents: &str) -> Result<()> {
    let file = dir.join(name);
    fs::write(&file, contents).map_err(|e| HarnessError::io(&file, e))
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Output(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn saturation_csv(cfg: &ExperimentConfig, reports: &[TaskReport]) -> String {
    let th = match cfg.switch_rule() {
        SwitchRule::Threshold(th) => fmt_float(th),
        SwitchRule::Interval(_) => "none".to_string(),
    };
    let mut out = String::from("task,mu_sat,th,switched,fl_mass,el_mass\n");
    for r in reports {
        let s = &r.saturation;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6e},{:.6e}",
            r.task,
            fmt_opt(s.mu),
            th,
            u8::from(r.switch_next),
            s.late_mass,
            s.early_mass
        );
    }
    out
}

/// Writes every run artifact for `outcome` into `dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, outcome: &RunOutcome, dir: &FsPath) -> Result<()> {
    emit_metrics(&outcome.table, dir)?;
    for r in &outcome.reports {
        write(dir, &format!("confusion_{}.csv", r.task), &confusion_csv(&r.metrics.confusion))?;
    }
    let paths = PathsRecord {
        switches: &outcome.switches,
        distinct_paths: outcome.distinct_paths,
        tasks: outcome
            .reports
            .iter()
            .map(|r| TaskPaths {
                task: r.task,
                switched: r.switched,
                train_path: &r.train_path,
                inference_path: &r.inference_path,
                selected: r.selected,
                candidates: &r.candidates,
            })
            .collect(),
    };
    write(dir, "paths.json", &json(&paths)?)?;
    write(dir, "saturation.csv", &saturation_csv(cfg, &outcome.reports))?;
    let summary = Summary {
        mode: cfg.mode.as_str(),
        seed: cfg.seed,
        tasks: cfg.tasks,
        classes_per_task: cfg.classes_per_task,
        final_average: outcome.table.final_average().unwrap_or(f64::NAN),
        averages: outcome.table.rows.iter().map(|r| r.average).collect(),
        switches: &outcome.switches,
        distinct_paths: outcome.distinct_paths,
        phi: outcome.reports.iter().map(|r| r.phi).collect(),
        inference_macs_per_example: outcome
            .reports
            .last()
            .map_or(0, |r| r.inference_macs_per_example),
        train_macs: outcome.reports.iter().map(|r| r.train_macs).sum(),
    };
    write(dir, "summary.json", &json(&summary)?)?;
    write(dir, "config_echo.toml", &emit_config(cfg)?)?;
    let mut timing = String::from("task,seconds\n");
    for r in &outcome.reports {
        let _ = writeln!(timing, "{},{}", r.task, fmt_float(r.seconds));
    }
    write(dir, "timing.csv", &timing)
}

/// Loads the data, runs the configured mode and writes all artifacts into
/// the output directory. `progress` is called after every task.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&TaskReport),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let stream = load_stream(cfg)?;
    let outcome = execute_on(cfg, &stream, &mut |state, report| {
        if cfg.output.checkpoints {
            let file = dir.join(format!("checkpoint_{}.json", report.task));
            state.network.save_checkpoint(&state.inference_path, &file)?;
        }
        progress(report);
        Ok(())
    })?;
    write_artifacts(cfg, &outcome, &dir)?;
    Ok(outcome)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_with(cfg, &mut |_| {})
}
