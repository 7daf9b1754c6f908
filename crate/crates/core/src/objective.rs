//! Incremental objective: cross-entropy over the classes seen so far plus
//! temperature-scaled distillation against the previous network state on
//! the old classes, weighted by the plasticity controller.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::tensor::{log_softmax_rows, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("label {label} outside the {seen} seen classes")]
    UnseenLabel { label: usize, seen: usize },
    #[error("task {task} with {per_task} classes per task exceeds {classes} logits")]
    Task {
        task: usize,
        per_task: usize,
        classes: usize,
    },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        ObjectiveError::Autodiff(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Controller settings. `first_switch` is `S_0`, the task after which the
/// path configuration changed for the first time; `None` until it happens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub gamma: f64,
    pub temperature: f64,
    pub first_switch: Option<usize>,
}

fn check_task(task: usize, per_task: usize, classes: usize) -> Result<()> {
    if task == 0 || task * per_task > classes {
        return Err(ObjectiveError::Task {
            task,
            per_task,
            classes,
        });
    }
    Ok(())
}

/// `-(1/n) Σ_i log softmax(q_i[..kU])[y_i]`, recorded on the graph.
pub fn cross_entropy_seen(
    g: &mut Graph<'_>,
    logits: NodeId,
    labels: &[usize],
    task: usize,
    classes_per_task: usize,
) -> Result<NodeId> {
    let (n, classes) = (g.value(logits).rows(), g.value(logits).cols());
    check_task(task, classes_per_task, classes)?;
    if labels.len() != n || n == 0 {
        return Err(ObjectiveError::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let seen = task * classes_per_task;
    let mut weights = Tensor::zeros(&[n, seen]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= seen {
            return Err(ObjectiveError::UnseenLabel { label: y, seen });
        }
        weights.data_mut()[i * seen + y] = -1.0 / n as f64;
    }
    let sliced = g.slice_cols(logits, 0, seen)?;
    let log_probs = g.log_softmax(sliced, 1.0)?;
    Ok(g.weighted_sum(log_probs, weights)?)
}

/// `(1/n) Σ_i KL(σ(q'_i/t) ‖ σ(q_i/t))` over the `(k-1)U` old classes,
/// where `q'` are logits of the previous network state on the same batch.
/// Returns `None` for the first task, which has no old classes.
pub fn distillation_kl(
    g: &mut Graph<'_>,
    logits: NodeId,
    prev_logits: &Tensor,
    task: usize,
    classes_per_task: usize,
    temperature: f64,
) -> Result<Option<NodeId>> {
    let (n, classes) = (g.value(logits).rows(), g.value(logits).cols());
    check_task(task, classes_per_task, classes)?;
    if task == 1 {
        return Ok(None);
    }
    if prev_logits.rows() != n || prev_logits.cols() < (task - 1) * classes_per_task {
        return Err(ObjectiveError::Shape(format!(
            "previous logits {:?} do not cover {n} rows of the old classes",
            prev_logits.shape()
        )));
    }
    let old = (task - 1) * classes_per_task;
    let target_log = log_softmax_rows(&prev_logits.slice_cols(0, old)?, temperature);
    // KL = Σ p' log p' - Σ p' log p. The first term is a constant; it is
    // summed in the same order as the graph's weighted sum so that equal
    // logits cancel exactly.
    let weights = target_log.map(|l| l.exp() / n as f64);
    let entropy_term: f64 = target_log
        .data()
        .iter()
        .zip(weights.data())
        .map(|(l, w)| if *w > 0.0 { l * w } else { 0.0 })
        .sum();
    let sliced = g.slice_cols(logits, 0, old)?;
    let log_probs = g.log_softmax(sliced, temperature)?;
    let cross = g.weighted_sum(log_probs, weights.map(|w| -w))?;
    Ok(Some(g.linear(vec![(cross, 1.0)], entropy_term)?))
}

/// `φ(k, γ) = 1` for `k ≤ S_0`, `(k - S_0) γ` afterwards. Before the first
/// switch the coefficient stays 1.
pub fn controller_phi(task: usize, cfg: &ControllerConfig) -> f64 {
    match cfg.first_switch {
        Some(s0) if task > s0 => (task - s0) as f64 * cfg.gamma,
        _ => 1.0,
    }
}

/// `ce + φ · dist`.
pub fn total_loss(
    g: &mut Graph<'_>,
    ce: NodeId,
    dist: Option<NodeId>,
    phi: f64,
) -> Result<NodeId> {
    match dist {
        None => Ok(ce),
        Some(d) => Ok(g.linear(vec![(ce, 1.0), (d, phi)], 0.0)?),
    }
}
