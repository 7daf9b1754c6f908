use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::tensor::Tensor;

/// Fixed-budget store of randomly selected examples from earlier tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    budget: usize,
    data: Dataset,
    tasks: Vec<usize>,
    stored_tasks: BTreeSet<usize>,
}

impl ExemplarMemory {
    pub fn new(budget: usize, dim: usize) -> Self {
        Self {
            budget,
            data: Dataset::empty(dim),
            tasks: Vec::new(),
            stored_tasks: BTreeSet::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Task index of every stored entry, aligned with `data()`.
    pub fn task_of_entries(&self) -> &[usize] {
        &self.tasks
    }

    pub fn stored_tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.stored_tasks.iter().copied()
    }

    /// Stored entries per class label.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &y in self.data.labels() {
            *counts.entry(y).or_insert(0) += 1;
        }
        counts
    }

    /// Adds task `task` and rebalances the memory so each seen class gets an
    /// equal share of the budget. Classes with fewer examples than their share
    /// give the surplus to the others; every class keeps a seeded uniform
    /// subset of what it had.
    pub fn update_exemplars<R: Rng + ?Sized>(
        &mut self,
        task: usize,
        task_data: &Dataset,
        rng: &mut R,
    ) -> Result<()> {
        if self.stored_tasks.contains(&task) {
            return Err(DataError::TaskAlreadyStored(task));
        }
        if task_data.dim() != self.data.dim() {
            return Err(DataError::Invalid(format!(
                "task rows have width {}, memory holds width {}",
                task_data.dim(),
                self.data.dim()
            )));
        }
        // Candidate pool per class: (source, row index, task).
        let mut pool: BTreeMap<usize, Vec<(bool, usize, usize)>> = BTreeMap::new();
        for i in 0..self.data.len() {
            pool.entry(self.data.labels()[i])
                .or_default()
                .push((false, i, self.tasks[i]));
        }
        for i in 0..task_data.len() {
            pool.entry(task_data.labels()[i])
                .or_default()
                .push((true, i, task));
        }
        if self.budget < pool.len() {
            return Err(DataError::BudgetTooSmall {
                budget: self.budget,
                classes: pool.len(),
            });
        }
        let available: Vec<usize> = pool.values().map(Vec::len).collect();
        let quotas = water_fill(self.budget, &available);

        let mut data = Dataset::empty(self.data.dim());
        let mut tasks = Vec::new();
        for (entries, quota) in pool.values().zip(quotas) {
            let mut picked = sample(rng, entries.len(), quota).into_vec();
            picked.sort_unstable();
            for j in picked {
                let (fresh, i, t) = entries[j];
                let src = if fresh { task_data } else { &self.data };
                data.push(src.row(i), src.labels()[i]);
                tasks.push(t);
            }
        }
        self.data = data;
        self.tasks = tasks;
        self.stored_tasks.insert(task);
        Ok(())
    }

    /// Rows of `current` followed by the memory rows: the pool replay draws
    /// from, indexed as in [`replay_indices`].
    pub fn union_with(&self, current: &Dataset) -> Dataset {
        let mut out = current.clone();
        out.extend(&self.data);
        out
    }
}

/// Equal shares of `budget` over classes, capped by what each class has;
/// the remainder of an uneven split goes to the lowest class positions.
fn water_fill(budget: usize, available: &[usize]) -> Vec<usize> {
    let mut quota = vec![0usize; available.len()];
    let mut remaining = budget;
    let mut open: Vec<usize> = (0..available.len()).collect();
    // Classes that cannot fill an equal share keep everything they have;
    // the rest split what is left, extra units going to the lowest labels.
    loop {
        if open.is_empty() {
            break;
        }
        let share = remaining / open.len();
        let (short, rest): (Vec<usize>, Vec<usize>) = open.iter().partition(|&&c| available[c] <= share);
        if short.is_empty() {
            let extra = remaining % open.len();
            for (rank, &c) in open.iter().enumerate() {
                quota[c] = (share + usize::from(rank < extra)).min(available[c]);
            }
            break;
        }
        for c in short {
            quota[c] = available[c];
            remaining -= available[c];
        }
        open = rest;
    }
    quota
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// How replay batches split between memory and current-task data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReplayMix {
    /// Uniform over the union of memory and current data.
    Uniform,
    /// Each draw comes from memory with this probability.
    MemoryFraction { fraction: f64 },
}

/// Indices into the union pool `[current rows..., memory rows...]` for one
/// batch, drawn with replacement according to `mix`.
pub fn replay_indices<R: Rng + ?Sized>(
    n_current: usize,
    n_memory: usize,
    batch_size: usize,
    mix: ReplayMix,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch size must be at least 1".into()));
    }
    if n_current + n_memory == 0 {
        return Err(DataError::Invalid("nothing to replay".into()));
    }
    Ok((0..batch_size)
        .map(|_| match mix {
            ReplayMix::MemoryFraction { fraction } if n_memory > 0 && n_current > 0 => {
                if rng.random::<f64>() < fraction {
                    n_current + rng.random_range(0..n_memory)
                } else {
                    rng.random_range(0..n_current)
                }
            }
            _ => rng.random_range(0..n_current + n_memory),
        })
        .collect())
}

/// Draws `batch_size` examples with replacement from memory and `current`
/// according to `mix`.
pub fn replay_batch<R: Rng + ?Sized>(
    memory: &ExemplarMemory,
    current: &Dataset,
    batch_size: usize,
    mix: ReplayMix,
    rng: &mut R,
) -> Result<Batch> {
    let idx = replay_indices(current.len(), memory.len(), batch_size, mix, rng)?;
    let mut data = Vec::with_capacity(batch_size * current.dim());
    let mut labels = Vec::with_capacity(batch_size);
    for i in idx {
        let (src, row) = if i < current.len() {
            (current, i)
        } else {
            (memory.data(), i - current.len())
        };
        data.extend(src.row(row).iter().map(|&v| f64::from(v)));
        labels.push(src.labels()[row]);
    }
    Ok(Batch {
        x: Tensor::matrix(batch_size, current.dim(), data).expect("sized by construction"),
        labels,
    })
}
