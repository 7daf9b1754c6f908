//! Diagonal Fisher information over the exemplar set and the relative
//! saturation coefficient that decides when a new path is selected.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore};
use crate::data::Dataset;
use crate::model::{ModelError, Network};
use crate::objective::{cross_entropy_seen, ObjectiveError};
use crate::path::Path;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SaturationError {
    #[error("invalid layer sets: {0}")]
    Sets(String),
    #[error("fisher tensor for parameter {id} has shape {found:?}, expected {expected:?}")]
    Shape {
        id: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, SaturationError>;

/// Per-parameter squared gradients of one example.
pub type FisherSample = BTreeMap<ParamId, Tensor>;

/// Running element-wise maximum of per-example diagonal Fisher tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FisherAccumulator {
    entries: BTreeMap<ParamId, Tensor>,
    count: usize,
}

impl FisherAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(&id, t)| (id, t))
    }

    /// Sum of the diagonal entries of one parameter; 0 when absent.
    pub fn trace(&self, id: ParamId) -> f64 {
        self.entries.get(&id).map_or(0.0, Tensor::sum)
    }

    /// `acc := max(acc, f)` element-wise.
    pub fn fold_max(&mut self, f: &FisherSample) -> Result<()> {
        for (id, t) in f {
            if let Some(cur) = self.entries.get(id) {
                if cur.shape() != t.shape() {
                    return Err(SaturationError::Shape {
                        id: id.0,
                        expected: cur.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        for (id, t) in f {
            match self.entries.get_mut(id) {
                Some(cur) => {
                    for (a, &b) in cur.data_mut().iter_mut().zip(t.data()) {
                        *a = a.max(b);
                    }
                }
                None => {
                    self.entries.insert(*id, t.map(|v| v.max(0.0)));
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Folds another accumulator in; used to reduce partial results.
    pub fn merge(&mut self, other: &FisherAccumulator) -> Result<()> {
        let count = self.count + other.count;
        self.fold_max(&other.entries)?;
        self.count = count;
        Ok(())
    }
}

/// Parameter tensors at the start (`early`) and end (`late`) of the
/// trainable path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSets {
    pub early: Vec<ParamId>,
    pub late: Vec<ParamId>,
}

impl LayerSets {
    pub fn new(early: Vec<ParamId>, late: Vec<ParamId>) -> Result<Self> {
        if early.is_empty() || late.is_empty() {
            return Err(SaturationError::Sets("both sets must be nonempty".into()));
        }
        if early.iter().any(|id| late.contains(id)) {
            return Err(SaturationError::Sets("sets overlap".into()));
        }
        Ok(Self { early, late })
    }

    /// Early set: weights and biases of the first non-frozen block of
    /// `train_path`. Late set: those of the last non-frozen block when it
    /// differs from the first, plus the classifier when
    /// `include_classifier` is set. `None` when no block of the path is
    /// trainable or the late set would be empty.
    pub fn for_path(net: &Network, train_path: &Path, include_classifier: bool) -> Option<Self> {
        let trainable: Vec<(usize, usize)> = train_path
            .cells()
            .filter(|&(l, m)| !net.frozen().get(l, m))
            .collect();
        let first = *trainable.first()?;
        let last = *trainable.last()?;
        let early = net.module_params(first.0, first.1).to_vec();
        let mut late = Vec::new();
        if last != first {
            late.extend(net.module_params(last.0, last.1));
        }
        if include_classifier {
            late.extend(net.classifier_params());
        }
        Self::new(early, late).ok()
    }

    pub fn all(&self) -> Vec<ParamId> {
        self.early.iter().chain(&self.late).copied().collect()
    }
}

/// Squared gradients of a scalar log-likelihood built by `log_likelihood`,
/// for those `ids` that are not frozen.
pub fn squared_gradients<F>(store: &ParamStore, ids: &[ParamId], log_likelihood: F) -> Result<FisherSample>
where
    F: FnOnce(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let ll = log_likelihood(&mut g)?;
    let grads = g.backward(ll)?;
    let mut out = FisherSample::new();
    for &id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let sq = match grads.get(id) {
            Some(gr) => gr.map(|v| v * v),
            None => Tensor::zeros(store.value(id).shape()),
        };
        out.insert(id, sq);
    }
    Ok(out)
}

/// Diagonal Fisher of one example: squared gradient of
/// `log softmax(q[..seen])[label]` with respect to each non-frozen `ids`
/// parameter, with the network evaluated along `path`.
pub fn fisher_diagonal(
    net: &Network,
    path: &Path,
    input: &[f64],
    label: usize,
    task: usize,
    ids: &[ParamId],
) -> Result<FisherSample> {
    let per_task = net.config().classes_per_task;
    squared_gradients(net.params(), ids, |g| {
        let x = g.constant(Tensor::matrix(1, input.len(), input.to_vec()).map_err(AutodiffError::from)?);
        let logits = net.forward(g, path, x)?;
        // The negative log-likelihood has the same squared gradient.
        Ok(cross_entropy_seen(g, logits, &[label], task, per_task)?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    /// `None` when the early set carries no Fisher mass.
    pub mu: Option<f64>,
    pub late_mass: f64,
    pub early_mass: f64,
}

impl SaturationReport {
    pub fn undefined() -> Self {
        Self {
            mu: None,
            late_mass: 0.0,
            early_mass: 0.0,
        }
    }

    /// An undefined coefficient counts as saturated, except that an
    /// infinite threshold never triggers.
    pub fn triggers(&self, threshold: f64) -> bool {
        threshold != f64::INFINITY && self.mu.is_none_or(|mu| should_switch(mu, threshold))
    }
}

fn mean_trace(acc: &FisherAccumulator, ids: &[ParamId]) -> f64 {
    ids.iter().map(|&id| acc.trace(id)).sum::<f64>() / ids.len() as f64
}

/// `log(mean tr(I) over late / mean tr(I) over early)`.
pub fn saturation_coefficient(acc: &FisherAccumulator, sets: &LayerSets) -> SaturationReport {
    let late_mass = mean_trace(acc, &sets.late);
    let early_mass = mean_trace(acc, &sets.early);
    let mu = (early_mass > 0.0).then(|| (late_mass / early_mass).ln());
    SaturationReport {
        mu,
        late_mass,
        early_mass,
    }
}

/// Switch when the coefficient reaches the threshold (inclusive).
pub fn should_switch(mu: f64, threshold: f64) -> bool {
    mu >= threshold
}

/// Accumulates the Fisher over `exemplars` (or a seeded subset of at most
/// `cap` rows) and returns the coefficient for `sets`.
pub fn measure_saturation<R: Rng + ?Sized>(
    net: &Network,
    inference_path: &Path,
    sets: &LayerSets,
    exemplars: &Dataset,
    task: usize,
    cap: Option<usize>,
    rng: &mut R,
) -> Result<(SaturationReport, FisherAccumulator)> {
    let mut rows: Vec<usize> = match cap {
        Some(c) if c < exemplars.len() => sample(rng, exemplars.len(), c).into_vec(),
        _ => (0..exemplars.len()).collect(),
    };
    rows.sort_unstable();
    let ids = sets.all();
    let acc = rows
        .par_chunks(64)
        .map(|chunk| -> Result<FisherAccumulator> {
            let mut part = FisherAccumulator::new();
            let mut input = vec![0f64; exemplars.dim()];
            for &i in chunk {
                for (dst, &src) in input.iter_mut().zip(exemplars.row(i)) {
                    *dst = f64::from(src);
                }
                let f = fisher_diagonal(net, inference_path, &input, exemplars.labels()[i], task, &ids)?;
                part.fold_max(&f)?;
            }
            Ok(part)
        })
        .try_reduce(FisherAccumulator::new, |mut a, b| {
            a.merge(&b)?;
            Ok(a)
        })?;
    Ok((saturation_coefficient(&acc, sets), acc))
}
