//! Binary `L x M` path matrices and the logic that combines them.
//!
//! A training path selects exactly one module per layer. The inference path
//! is the OR of every training path selected so far, and the frozen region
//! and trainable portion of a new path fall out of XOR/AND on the two.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("path dimensions differ: {0}x{1} vs {2}x{3}")]
    Dimension(usize, usize, usize, usize),
    #[error("a path needs at least one layer and one module, got {0}x{1}")]
    Empty(usize, usize),
    #[error("ragged path rows")]
    Ragged,
    #[error("switch log entries must strictly increase: {last} then {next}")]
    NonIncreasingSwitch { last: usize, next: usize },
}

pub type Result<T> = std::result::Result<T, PathError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path {
    layers: usize,
    modules: usize,
    bits: Vec<bool>,
}

impl Path {
    pub fn zeros(layers: usize, modules: usize) -> Self {
        Self {
            layers,
            modules,
            bits: vec![false; layers * modules],
        }
    }

    pub fn ones(layers: usize, modules: usize) -> Self {
        Self {
            layers,
            modules,
            bits: vec![true; layers * modules],
        }
    }

    /// One selected module index per layer.
    pub fn from_choices(modules: usize, choices: &[usize]) -> Self {
        let mut p = Self::zeros(choices.len(), modules);
        for (l, &m) in choices.iter().enumerate() {
            p.set(l, m, true);
        }
        p
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let modules = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != modules) {
            return Err(PathError::Ragged);
        }
        Ok(Self {
            layers: rows.len(),
            modules,
            bits: rows.iter().flatten().map(|&b| b != 0).collect(),
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits
            .chunks(self.modules.max(1))
            .map(|r| r.iter().map(|&b| u8::from(b)).collect())
            .collect()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn modules(&self) -> usize {
        self.modules
    }

    pub fn get(&self, layer: usize, module: usize) -> bool {
        self.bits[layer * self.modules + module]
    }

    pub fn set(&mut self, layer: usize, module: usize, on: bool) {
        self.bits[layer * self.modules + module] = on;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Active module indices of one layer, ascending.
    pub fn active(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.modules).filter(move |&m| self.get(layer, m))
    }

    /// All active `(layer, module)` cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.layers).flat_map(move |l| self.active(l).map(move |m| (l, m)))
    }

    pub fn has_one_hot_rows(&self) -> bool {
        (0..self.layers).all(|l| self.active(l).count() == 1)
    }

    /// Every row has at least one active module.
    pub fn covers_every_layer(&self) -> bool {
        (0..self.layers).all(|l| self.active(l).next().is_some())
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Path) -> Result<bool> {
        self.check(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    fn check(&self, other: &Path) -> Result<()> {
        if self.layers != other.layers || self.modules != other.modules {
            return Err(PathError::Dimension(
                self.layers,
                self.modules,
                other.layers,
                other.modules,
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Path, f: impl Fn(bool, bool) -> bool) -> Result<Path> {
        self.check(other)?;
        Ok(Path {
            layers: self.layers,
            modules: self.modules,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn or(&self, other: &Path) -> Result<Path> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and(&self, other: &Path) -> Result<Path> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn xor(&self, other: &Path) -> Result<Path> {
        self.zip_with(other, |a, b| a ^ b)
    }
}

impl Serialize for Path {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<u8>>::deserialize(d)?;
        Path::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Uniform one-hot module choice per layer.
pub fn sample_training_path<R: Rng + ?Sized>(
    layers: usize,
    modules: usize,
    rng: &mut R,
) -> Result<Path> {
    if layers == 0 || modules == 0 {
        return Err(PathError::Empty(layers, modules));
    }
    let choices: Vec<usize> = (0..layers).map(|_| rng.random_range(0..modules)).collect();
    Ok(Path::from_choices(modules, &choices))
}

pub fn path_or(a: &Path, b: &Path) -> Result<Path> {
    a.or(b)
}

pub fn path_and(a: &Path, b: &Path) -> Result<Path> {
    a.and(b)
}

pub fn path_xor(a: &Path, b: &Path) -> Result<Path> {
    a.xor(b)
}

/// Modules of `train` not already trained in `trained`:
/// `train ⊻ (train ∧ trained)`.
pub fn trainable_portion(train: &Path, trained: &Path) -> Result<Path> {
    train.xor(&train.and(trained)?)
}

/// `inference_at_last_switch ⊻ train`.
pub fn frozen_mask(inference_at_last_switch: &Path, train: &Path) -> Result<Path> {
    inference_at_last_switch.xor(train)
}

/// Task indices after which the path was switched. The first entry is the
/// controller's `S_0`, the last one `S_{-1}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchLog {
    entries: Vec<usize>,
}

impl SwitchLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, task: usize) -> Result<()> {
        if let Some(&last) = self.entries.last() {
            if task <= last {
                return Err(PathError::NonIncreasingSwitch { last, next: task });
            }
        }
        self.entries.push(task);
        Ok(())
    }

    pub fn first(&self) -> Option<usize> {
        self.entries.first().copied()
    }

    pub fn last(&self) -> Option<usize> {
        self.entries.last().copied()
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }
}
