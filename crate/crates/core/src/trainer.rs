//! Task-by-task orchestration of the incremental learner, from candidate
//! path training to the saturation check that picks the next path. The
//! finetune and joint baselines run through the same data and evaluation
//! code with the incremental machinery switched off.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::data::{replay_indices, DataError, Dataset, ExemplarMemory, ReplayMix, TaskStream};
use crate::model::{ModelError, Network, NetworkConfig};
use crate::objective::{
    controller_phi, cross_entropy_seen, distillation_kl, total_loss, ControllerConfig,
    ObjectiveError,
};
use crate::optim::{AdamState, LrSchedule};
use crate::path::{sample_training_path, Path, PathError, SwitchLog};
use crate::saturation::{measure_saturation, LayerSets, SaturationError, SaturationReport};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("task {got} out of order, expected task {expected}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("non-finite loss in task {task}, epoch {epoch}")]
    NonFiniteLoss { task: usize, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Saturation(#[from] SaturationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Rpsnet,
    Finetune,
    Joint,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rpsnet => "rpsnet",
            Mode::Finetune => "finetune",
            Mode::Joint => "joint",
        }
    }
}

/// When a new path is selected after task 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SwitchRule {
    /// Switch when the saturation coefficient reaches the threshold.
    Threshold(f64),
    /// Switch after every `J` tasks regardless of saturation.
    Interval(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GammaRule {
    Fixed(f64),
    /// Current-task training samples divided by stored exemplars.
    SampleRatio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub candidates: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub switch: SwitchRule,
    pub gamma: GammaRule,
    pub temperature: f64,
    pub memory_budget: usize,
    pub replay: ReplayMix,
    pub validation_fraction: f64,
    pub fisher_cap: Option<usize>,
    pub classifier_in_late_set: bool,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainerError::Config(m));
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction {} must lie in [0, 1)",
                self.validation_fraction
            ));
        }
        match self.switch {
            SwitchRule::Interval(0) => return bad("switch interval must be at least 1".into()),
            SwitchRule::Threshold(th) if th.is_nan() => return bad("threshold is NaN".into()),
            _ => {}
        }
        if let GammaRule::Fixed(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("gamma {g} must be a nonnegative number"));
            }
        }
        if let ReplayMix::MemoryFraction { fraction } = self.replay {
            if !(0.0..=1.0).contains(&fraction) {
                return bad(format!("replay fraction {fraction} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Mixes `tags` into `base` with splitmix64 so every random stream of a run
/// (initialisation, path sampling, each candidate's batches, ...) gets its
/// own seed independent of execution order.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const STREAM_INIT: u64 = 1;
const STREAM_PATHS: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_MEMORY: u64 = 5;
const STREAM_FISHER: u64 = 6;

fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Network state and previous-task copy used as the distillation teacher.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub network: Network,
    pub inference_path: Path,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub network: Network,
    pub inference_path: Path,
    pub train_path: Option<Path>,
    pub switches: SwitchLog,
    pub memory: ExemplarMemory,
    pub snapshot: Option<Snapshot>,
    /// Distinct training paths selected so far, in order of selection.
    pub selected_paths: Vec<Path>,
    completed: usize,
    switch_pending: bool,
}

impl RunState {
    pub fn new(net_config: NetworkConfig, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let (layers, modules) = (net_config.layers(), net_config.modules);
        let dim = net_config.input_dim;
        let network = Network::build(net_config, &mut rng_for(cfg.seed, &[STREAM_INIT]))?;
        Ok(Self {
            network,
            inference_path: Path::zeros(layers, modules),
            train_path: None,
            switches: SwitchLog::new(),
            memory: ExemplarMemory::new(cfg.memory_budget, dim),
            snapshot: None,
            selected_paths: Vec::new(),
            completed: 0,
            switch_pending: true,
        })
    }

    /// Tasks finished so far.
    pub fn completed(&self) -> usize {
        self.completed
    }
}

/// Everything a candidate needs to train on one task. The pool is the
/// current-task rows followed by the exemplar rows.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub task: usize,
    pub classes_per_task: usize,
    pub pool: Dataset,
    pub current_rows: usize,
    /// Previous-state logits for every pool row, when distilling.
    pub teacher: Option<Tensor>,
    pub validation: Dataset,
    pub phi: f64,
}

#[derive(Debug, Clone)]
pub struct CandidateOutcome {
    pub path: Path,
    pub network: Network,
    pub validation_accuracy: Option<f64>,
    pub final_loss: f64,
    pub train_macs: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub path: Path,
    pub validation_accuracy: Option<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: usize,
    /// Accuracy on each seen task, task 1 first.
    pub task_accuracy: Vec<f64>,
    /// Mean over seen tasks, which equals the mean per-class accuracy.
    pub average: f64,
    /// `confusion[true][predicted]` over the seen classes.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    /// A new path was selected for this task.
    pub switched: bool,
    pub train_path: Path,
    pub inference_path: Path,
    pub candidates: Vec<CandidateSummary>,
    pub selected: usize,
    pub phi: f64,
    pub gamma: f64,
    pub saturation: SaturationReport,
    /// The saturation rule asks for a new path at the next task.
    pub switch_next: bool,
    pub metrics: MetricsRow,
    pub inference_macs_per_example: u64,
    pub train_macs: u64,
    pub seconds: f64,
}

/// Index of the highest validation accuracy; ties and missing values go to
/// the lowest index. `None` for an empty list.
pub fn select_best(accuracies: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, acc) in accuracies.iter().enumerate() {
        let a = acc.filter(|v| !v.is_nan()).unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i)
}

const EVAL_CHUNK: usize = 512;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class among the first `seen` logits for every row of `data`.
pub fn predict_classes(net: &Network, path: &Path, data: &Dataset, seen: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.gather(chunk);
        let logits = net.predict(path, &x)?;
        out.extend((0..logits.rows()).map(|r| argmax(&logits.row(r)[..seen])));
    }
    Ok(out)
}

fn logits_for(net: &Network, path: &Path, data: &Dataset) -> Result<Tensor> {
    let classes = net.config().classes();
    let mut all = Vec::with_capacity(data.len() * classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.gather(chunk);
        all.extend(net.predict(path, &x)?.into_data());
    }
    Ok(Tensor::matrix(data.len(), classes, all).map_err(AutodiffError::from)?)
}

/// Fraction of rows whose prediction over `seen` classes is correct.
pub fn accuracy(net: &Network, path: &Path, data: &Dataset, seen: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = predict_classes(net, path, data, seen)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy on the test sets of tasks `1..=upto`, task-agnostic: every
/// prediction ranges over all `upto · U` seen classes.
pub fn evaluate(net: &Network, path: &Path, stream: &TaskStream, upto: usize) -> Result<MetricsRow> {
    let per_task = stream.classes_per_task;
    let seen = upto * per_task;
    let mut confusion = vec![vec![0u64; seen]; seen];
    for t in 1..=upto {
        let test = &stream.task(t).test;
        let pred = predict_classes(net, path, test, seen)?;
        for (&p, &y) in pred.iter().zip(test.labels()) {
            confusion[y][p] += 1;
        }
    }
    let class_acc: Vec<f64> = (0..seen)
        .map(|c| {
            let total: u64 = confusion[c].iter().sum();
            if total == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / total as f64
            }
        })
        .collect();
    let task_accuracy: Vec<f64> = class_acc
        .chunks(per_task)
        .map(|c| c.iter().sum::<f64>() / per_task as f64)
        .collect();
    let average = task_accuracy.iter().sum::<f64>() / upto as f64;
    Ok(MetricsRow {
        task: upto,
        task_accuracy,
        average,
        confusion,
    })
}

/// Trains `net` along `path` on the context pool for `cfg.epochs` epochs
/// with a fresh Adam state. Returns the mean loss of the last epoch.
pub fn fit(
    net: &mut Network,
    path: &Path,
    ctx: &TaskContext,
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let schedule = LrSchedule::halving(cfg.learning_rate, cfg.epochs);
    let mut adam = AdamState::new(cfg.learning_rate);
    let n = ctx.pool.len();
    let steps = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        adam.learning_rate = schedule.rate(epoch);
        let batches: Vec<Vec<usize>> = match cfg.replay {
            ReplayMix::Uniform => {
                order.shuffle(rng);
                order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
            }
            mix => (0..steps)
                .map(|_| {
                    replay_indices(ctx.current_rows, n - ctx.current_rows, cfg.batch_size, mix, rng)
                })
                .collect::<std::result::Result<_, _>>()?,
        };
        let mut total = 0.0;
        let mut rows = 0usize;
        for idx in &batches {
            let (x, labels) = ctx.pool.gather(idx);
            let grads = {
                let mut g = Graph::new(net.params());
                let input = g.constant(x);
                let logits = net.forward(&mut g, path, input)?;
                let ce = cross_entropy_seen(&mut g, logits, &labels, ctx.task, ctx.classes_per_task)?;
                let dist = match &ctx.teacher {
                    Some(teacher) => {
                        let prev = gather_rows(teacher, idx);
                        distillation_kl(
                            &mut g,
                            logits,
                            &prev,
                            ctx.task,
                            ctx.classes_per_task,
                            cfg.temperature,
                        )?
                    }
                    None => None,
                };
                let loss = total_loss(&mut g, ce, dist, ctx.phi)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(TrainerError::NonFiniteLoss {
                        task: ctx.task,
                        epoch: epoch + 1,
                    });
                }
                total += value * idx.len() as f64;
                rows += idx.len();
                g.backward(loss)?
            };
            net.params_mut().accumulate(&grads)?;
            adam.step(net.params_mut());
        }
        last = total / rows as f64;
    }
    Ok(last)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), cols, data).expect("sized by construction")
}

/// Trains one candidate path on top of `base`. The forward pass runs along
/// `prior ∨ candidate` so the new modules learn the residual with respect to
/// the fixed paths; only modules not frozen in `base` change.
pub fn train_candidate(
    base: &Network,
    prior: &Path,
    candidate: &Path,
    ctx: &TaskContext,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<CandidateOutcome> {
    let mut network = base.clone();
    let forward_path = prior.or(candidate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let final_loss = fit(&mut network, &forward_path, ctx, cfg, &mut rng)?;
    let seen = ctx.task * ctx.classes_per_task;
    let validation_accuracy = if ctx.validation.is_empty() {
        None
    } else {
        Some(accuracy(&network, &forward_path, &ctx.validation, seen)?)
    };
    let per_example = network.macs_per_example(&forward_path);
    let train_macs = 3 * per_example * (cfg.epochs * ctx.pool.len()) as u64;
    Ok(CandidateOutcome {
        path: candidate.clone(),
        network,
        validation_accuracy,
        final_loss,
        train_macs,
    })
}

/// Runs task `k` (one-based) and advances `state`.
pub fn run_task(
    state: &mut RunState,
    stream: &TaskStream,
    k: usize,
    cfg: &TrainerConfig,
) -> Result<TaskReport> {
    let started = Instant::now();
    if k != state.completed + 1 || k > stream.len() {
        return Err(TrainerError::OutOfOrder {
            expected: state.completed + 1,
            got: k,
        });
    }
    let task = stream.task(k);
    let per_task = stream.classes_per_task;
    let (layers, modules) = (state.network.layers(), state.network.modules());
    let incremental = cfg.mode == Mode::Rpsnet;

    // (1) Switch decision. Baselines keep their first path.
    let switched = k == 1 || (incremental && state.switch_pending);
    if switched && k > 1 {
        state.switches.record(k - 1)?;
    }
    let gamma = match cfg.gamma {
        GammaRule::Fixed(g) => g,
        GammaRule::SampleRatio if state.memory.is_empty() => 1.0,
        GammaRule::SampleRatio => task.train.len() as f64 / state.memory.len() as f64,
    };
    let phi = controller_phi(
        k,
        &ControllerConfig {
            gamma,
            temperature: cfg.temperature,
            first_switch: state.switches.first(),
        },
    );

    // (2) Candidate paths, pools and freezing.
    if cfg.mode == Mode::Joint && k > 1 {
        state.network = Network::build(
            state.network.config().clone(),
            &mut rng_for(cfg.seed, &[STREAM_INIT]),
        )?;
    }
    let candidate_paths: Vec<Path> = if switched {
        let count = if incremental { cfg.candidates } else { 1 };
        let mut rng = rng_for(cfg.seed, &[STREAM_PATHS, k as u64]);
        (0..count)
            .map(|_| sample_training_path(layers, modules, &mut rng))
            .collect::<std::result::Result<_, _>>()?
    } else {
        vec![state.train_path.clone().expect("a path is selected at task 1")]
    };
    if incremental && switched && k > 1 {
        state.network.apply_freeze(&state.inference_path)?;
    }
    let current = match cfg.mode {
        Mode::Joint => stream.train_upto(k),
        _ => task.train.clone(),
    };
    let select = candidate_paths.len() > 1;
    let (kept, held_out) = if select && cfg.validation_fraction > 0.0 {
        current.split(cfg.validation_fraction, &mut rng_for(cfg.seed, &[STREAM_SPLIT, k as u64]))
    } else {
        (current, Dataset::empty(task.train.dim()))
    };
    let validation = if select {
        state.memory.union_with(&held_out)
    } else {
        held_out
    };
    let pool = state.memory.union_with(&kept);
    let teacher = match (&state.snapshot, incremental && k > 1) {
        (Some(s), true) => Some(logits_for(&s.network, &s.inference_path, &pool)?),
        _ => None,
    };
    let teacher_macs = match &state.snapshot {
        Some(s) if teacher.is_some() => s.network.macs_per_example(&s.inference_path) * pool.len() as u64,
        _ => 0,
    };
    let ctx = TaskContext {
        task: k,
        classes_per_task: per_task,
        current_rows: kept.len(),
        pool,
        teacher,
        validation,
        phi: if incremental { phi } else { 1.0 },
    };

    let prior = if incremental {
        state.inference_path.clone()
    } else {
        Path::zeros(layers, modules)
    };
    let outcomes: Vec<CandidateOutcome> = candidate_paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let seed = derive_seed(cfg.seed, &[STREAM_TRAIN, k as u64, i as u64]);
            train_candidate(&state.network, &prior, p, &ctx, cfg, seed)
        })
        .collect::<Result<_>>()?;
    let accuracies: Vec<Option<f64>> = outcomes.iter().map(|o| o.validation_accuracy).collect();
    let selected = select_best(&accuracies).expect("at least one candidate");
    let train_macs = outcomes.iter().map(|o| o.train_macs).sum::<u64>() + teacher_macs;
    let candidates: Vec<CandidateSummary> = outcomes
        .iter()
        .map(|o| CandidateSummary {
            path: o.path.clone(),
            validation_accuracy: o.validation_accuracy,
            final_loss: o.final_loss,
        })
        .collect();
    let best = outcomes.into_iter().nth(selected).expect("selected index is valid");
    state.network = best.network;
    if switched && !state.selected_paths.contains(&best.path) {
        state.selected_paths.push(best.path.clone());
    }
    let train_path = best.path;

    // (3) Fuse the inference path.
    state.inference_path = state.inference_path.or(&train_path)?;
    state.train_path = Some(train_path.clone());

    let mut saturation = SaturationReport::undefined();
    let mut switch_next = false;
    if incremental {
        // (4) Exemplars, (5) teacher snapshot, (6) saturation.
        let mut rng = rng_for(cfg.seed, &[STREAM_MEMORY, k as u64]);
        state.memory.update_exemplars(k, &task.train, &mut rng)?;
        state.snapshot = Some(Snapshot {
            network: state.network.clone(),
            inference_path: state.inference_path.clone(),
        });
        if let Some(sets) = LayerSets::for_path(&state.network, &train_path, cfg.classifier_in_late_set) {
            let mut rng = rng_for(cfg.seed, &[STREAM_FISHER, k as u64]);
            saturation = measure_saturation(
                &state.network,
                &state.inference_path,
                &sets,
                state.memory.data(),
                k,
                cfg.fisher_cap,
                &mut rng,
            )?
            .0;
        }
        switch_next = match cfg.switch {
            SwitchRule::Threshold(th) => saturation.triggers(th),
            SwitchRule::Interval(j) => k.is_multiple_of(j),
        };
    }
    state.switch_pending = switch_next;

    // (7) Evaluate on every seen task.
    let metrics = evaluate(&state.network, &state.inference_path, stream, k)?;
    state.completed = k;
    Ok(TaskReport {
        task: k,
        switched,
        train_path,
        inference_path: state.inference_path.clone(),
        candidates,
        selected,
        phi: ctx.phi,
        gamma,
        saturation,
        switch_next,
        metrics,
        inference_macs_per_example: state.network.macs_per_example(&state.inference_path),
        train_macs,
        seconds: started.elapsed().as_secs_f64(),
    })
}
