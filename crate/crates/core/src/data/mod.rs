//! Datasets split into class-incremental task streams, plus the exemplar
//! memory that replays old classes.

pub mod exemplar;
pub mod idx;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub use exemplar::{replay_batch, replay_indices, Batch, ExemplarMemory, ReplayMix};
pub use idx::ingest_idx;
pub use synthetic::{make_synthetic_stream, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("exemplar budget {budget} cannot hold one example for each of {classes} classes")]
    BudgetTooSmall { budget: usize, classes: usize },
    #[error("task {0} is already represented in exemplar memory")]
    TaskAlreadyStored(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Row-major feature matrix with one class label per row. Features are kept
/// in `f32` to halve the footprint of image corpora; batches are widened to
/// `f64` tensors on gather.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f32], label: usize) {
        debug_assert_eq!(row.len(), self.dim);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &Dataset) {
        debug_assert_eq!(other.dim, self.dim);
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim);
        out.features.reserve(indices.len() * self.dim);
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    /// Rows whose label satisfies `keep`, in original order.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx)
    }

    /// Features of `indices` as an `[n, dim]` tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| f64::from(v)));
            labels.push(self.labels[i]);
        }
        let x = Tensor::matrix(indices.len(), self.dim, data).expect("sized by construction");
        (x, labels)
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }

    /// Seeded split into `(kept, held_out)` with `round(fraction · n)` rows
    /// held out.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let held = ((self.len() as f64) * fraction).round() as usize;
        let (held_idx, kept_idx) = idx.split_at(held.min(self.len()));
        let mut kept_idx = kept_idx.to_vec();
        let mut held_idx = held_idx.to_vec();
        kept_idx.sort_unstable();
        held_idx.sort_unstable();
        (self.subset(&kept_idx), self.subset(&held_idx))
    }
}

/// One task of a class-incremental stream. `index` is one-based and the
/// task owns the global labels `(index-1)·U .. index·U`.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub classes_per_task: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    /// Groups consecutive labels into tasks of `classes_per_task` classes:
    /// task 1 gets labels `0..U`, task 2 `U..2U`, and so on. Rows with
    /// labels beyond `tasks · U` are dropped.
    pub fn from_split(
        train: &Dataset,
        test: &Dataset,
        tasks: usize,
        classes_per_task: usize,
    ) -> Result<Self> {
        if tasks == 0 || classes_per_task == 0 {
            return Err(DataError::Invalid("empty task grouping".into()));
        }
        if train.dim() != test.dim() {
            return Err(DataError::Invalid(format!(
                "train width {} differs from test width {}",
                train.dim(),
                test.dim()
            )));
        }
        let mut out = Vec::with_capacity(tasks);
        for t in 0..tasks {
            let lo = t * classes_per_task;
            let hi = lo + classes_per_task;
            let in_task = |y: usize| (lo..hi).contains(&y);
            let task = Task {
                index: t + 1,
                classes: (lo..hi).collect(),
                train: train.filter_labels(in_task),
                test: test.filter_labels(in_task),
            };
            if task.train.is_empty() || task.test.is_empty() {
                return Err(DataError::Invalid(format!(
                    "task {} (classes {lo}..{hi}) has no train or test rows",
                    t + 1
                )));
            }
            out.push(task);
        }
        Ok(Self {
            classes_per_task,
            tasks: out,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }

    /// One-based task lookup.
    pub fn task(&self, index: usize) -> &Task {
        &self.tasks[index - 1]
    }

    /// All training rows of tasks `1..=upto`.
    pub fn train_upto(&self, upto: usize) -> Dataset {
        let mut out = Dataset::empty(self.dim());
        for t in &self.tasks[..upto] {
            out.extend(&t.train);
        }
        out
    }
}
