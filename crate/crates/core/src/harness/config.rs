use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::data::{ReplayMix, SyntheticSpec};
use crate::model::NetworkConfig;
use crate::trainer::{GammaRule, Mode, SwitchRule, TrainerConfig};

const MNIST_DIM: usize = 784;
const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Directory holding the four standard MNIST IDX files.
    Mnist { dir: PathBuf },
    Synthetic {
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
        /// Seed of the stream itself; the experiment seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl DatasetConfig {
    pub fn input_dim(&self) -> usize {
        match self {
            DatasetConfig::Mnist { .. } => MNIST_DIM,
            DatasetConfig::Synthetic { dim, .. } => *dim,
        }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self {
            DatasetConfig::Synthetic {
                dim,
                train_per_class,
                test_per_class,
                separation,
                ..
            } => Some(SyntheticSpec {
                dim: *dim,
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                separation: *separation,
            }),
            DatasetConfig::Mnist { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden_dims: Vec<usize>,
    pub modules: usize,
    pub attention: bool,
    /// One-based; the last layer when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_layer: Option<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![400, 400],
            modules: 8,
            attention: true,
            attention_layer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRuleName {
    Fixed,
    SampleRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub candidates: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Saturation threshold; 0 when neither this nor `switch_interval` is set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Fixed switching every `J` tasks instead of the saturation rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub switch_interval: Option<usize>,
    pub gamma: f64,
    pub gamma_rule: GammaRuleName,
    pub temperature: f64,
    pub validation_fraction: f64,
    /// Probability that a replayed example comes from memory; uniform over
    /// the union when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay_memory_fraction: Option<f64>,
    /// Exemplars used for the Fisher estimate; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fisher_cap: Option<usize>,
    pub classifier_in_late_set: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            candidates: 8,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 128,
            threshold: None,
            switch_interval: None,
            gamma: 2.5,
            gamma_rule: GammaRuleName::Fixed,
            temperature: 2.0,
            validation_fraction: 0.1,
            replay_memory_fraction: None,
            fisher_cap: None,
            classifier_in_late_set: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub budget: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self { budget: 4400 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Fill the `seconds` column of metrics.csv. Off by default so repeated
    /// runs produce identical files; timings always go to timing.csv.
    pub record_wall_time: bool,
    /// Save a network checkpoint after every task.
    pub checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Total class count; must equal `tasks · classes_per_task` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_mode() -> Mode {
    Mode::Rpsnet
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.tasks == 0 || self.classes_per_task == 0 {
            return bad("tasks and classes_per_task must be at least 1".into());
        }
        let total = self.tasks * self.classes_per_task;
        if let Some(c) = self.classes {
            if c != total {
                return bad(format!(
                    "classes = {c} but tasks · classes_per_task = {total}"
                ));
            }
        }
        if matches!(self.dataset, DatasetConfig::Mnist { .. }) && total > MNIST_CLASSES {
            return bad(format!("MNIST has {MNIST_CLASSES} classes, {total} requested"));
        }
        if self.trainer.threshold.is_some() && self.trainer.switch_interval.is_some() {
            return bad("set either trainer.threshold or trainer.switch_interval, not both".into());
        }
        if self.mode == Mode::Rpsnet && self.memory.budget < total {
            return bad(format!(
                "memory budget {} is below the class count {total}",
                self.memory.budget
            ));
        }
        self.network_config().validate()?;
        self.trainer_config().validate()?;
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_dim: self.dataset.input_dim(),
            hidden_dims: self.network.hidden_dims.clone(),
            modules: self.network.modules,
            tasks: self.tasks,
            classes_per_task: self.classes_per_task,
            attention: self.network.attention,
            attention_layer: self
                .network
                .attention_layer
                .unwrap_or(self.network.hidden_dims.len()),
        }
    }

    pub fn switch_rule(&self) -> SwitchRule {
        match (self.trainer.switch_interval, self.trainer.threshold) {
            (Some(j), _) => SwitchRule::Interval(j),
            (None, th) => SwitchRule::Threshold(th.unwrap_or(0.0)),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            mode: self.mode,
            candidates: t.candidates,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            switch: self.switch_rule(),
            gamma: match t.gamma_rule {
                GammaRuleName::Fixed => GammaRule::Fixed(t.gamma),
                GammaRuleName::SampleRatio => GammaRule::SampleRatio,
            },
            temperature: t.temperature,
            memory_budget: match self.mode {
                Mode::Rpsnet => self.memory.budget,
                _ => 0,
            },
            replay: match t.replay_memory_fraction {
                Some(fraction) => ReplayMix::MemoryFraction { fraction },
                None => ReplayMix::Uniform,
            },
            validation_fraction: t.validation_fraction,
            fisher_cap: t.fisher_cap,
            classifier_in_late_set: t.classifier_in_late_set,
            seed: self.seed,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.mode.as_str()))
    }
}

/// Parses and validates a TOML experiment file, filling defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(file: &FsPath) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(file).map_err(|e| HarnessError::io(file, e))?;
    parse_config_str(&text).map_err(|e| match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", file.display())),
        other => other,
    })
}

/// TOML text that parses back to `cfg`.
pub fn emit_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| HarnessError::Config(e.to_string()))
}
