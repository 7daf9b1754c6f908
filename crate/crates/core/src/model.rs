//! The `L x M` modular network.
//!
//! Each layer holds `M` parallel dense blocks (`affine -> relu -> affine`)
//! and a skip module. A path decides which blocks contribute; their outputs
//! are summed onto the skip output. An affine classifier over the final
//! feature vector is shared by every task.

use std::fs;
use std::path::Path as FsPath;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore};
use crate::path::{Path, PathError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("modules cannot be unfrozen once frozen")]
    UnfreezeUnsupported,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Autodiff(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Output width of each layer; its length is the layer count `L`.
    pub hidden_dims: Vec<usize>,
    /// Parallel modules per layer, `M`.
    pub modules: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub attention: bool,
    /// One-based layer index where peak-response attention is applied.
    pub attention_layer: usize,
}

impl NetworkConfig {
    pub fn layers(&self) -> usize {
        self.hidden_dims.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_dims[layer - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.hidden_dims.is_empty() {
            return fail("at least one layer is required".into());
        }
        if self.modules == 0 {
            return fail("at least one module per layer is required".into());
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return fail(format!(
                "zero-width layer in input {} / hidden {:?}",
                self.input_dim, self.hidden_dims
            ));
        }
        if self.tasks == 0 || self.classes_per_task == 0 {
            return fail("tasks and classes_per_task must be positive".into());
        }
        if self.attention_layer == 0 || self.attention_layer > self.layers() {
            return fail(format!(
                "attention_layer {} outside 1..={}",
                self.attention_layer,
                self.layers()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    first: Dense,
    second: Dense,
}

#[derive(Debug, Clone, Copy)]
enum Skip {
    Identity,
    Projection(Dense),
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    params: ParamStore,
    blocks: Vec<Block>,
    skips: Vec<Skip>,
    classifier: Dense,
    frozen: Path,
}

fn he_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction")
}

fn dense<R: Rng + ?Sized>(
    params: &mut ParamStore,
    rng: &mut R,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Dense {
    let weight = params.add(format!("{name}.weight"), he_uniform(rng, d_in, d_out));
    let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    Dense { weight, bias }
}

impl Network {
    pub fn build<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layers, modules) = (config.layers(), config.modules);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(layers * modules);
        let mut skips = Vec::with_capacity(layers);
        for l in 0..layers {
            let (d_in, d_out) = (config.layer_input_dim(l), config.hidden_dims[l]);
            for m in 0..modules {
                let first = dense(&mut params, rng, &format!("layer{l}.module{m}.fc1"), d_in, d_out);
                let second =
                    dense(&mut params, rng, &format!("layer{l}.module{m}.fc2"), d_out, d_out);
                blocks.push(Block { first, second });
            }
            skips.push(if d_in == d_out {
                Skip::Identity
            } else {
                Skip::Projection(dense(&mut params, rng, &format!("layer{l}.skip"), d_in, d_out))
            });
        }
        let classifier = dense(
            &mut params,
            rng,
            "classifier",
            config.feature_dim(),
            config.classes(),
        );
        Ok(Self {
            frozen: Path::zeros(layers, modules),
            config,
            params,
            blocks,
            skips,
            classifier,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn frozen(&self) -> &Path {
        &self.frozen
    }

    pub fn layers(&self) -> usize {
        self.config.layers()
    }

    pub fn modules(&self) -> usize {
        self.config.modules
    }

    fn block(&self, layer: usize, module: usize) -> &Block {
        &self.blocks[layer * self.config.modules + module]
    }

    /// Weight and bias tensors of a module, in forward order.
    pub fn module_params(&self, layer: usize, module: usize) -> [ParamId; 4] {
        let b = self.block(layer, module);
        [b.first.weight, b.first.bias, b.second.weight, b.second.bias]
    }

    /// `None` when the skip is an identity.
    pub fn skip_params(&self, layer: usize) -> Option<[ParamId; 2]> {
        match self.skips[layer] {
            Skip::Identity => None,
            Skip::Projection(d) => Some([d.weight, d.bias]),
        }
    }

    pub fn skip_is_identity(&self, layer: usize) -> bool {
        matches!(self.skips[layer], Skip::Identity)
    }

    pub fn classifier_params(&self) -> [ParamId; 2] {
        [self.classifier.weight, self.classifier.bias]
    }

    fn check_path(&self, path: &Path) -> Result<()> {
        if path.layers() != self.layers() || path.modules() != self.modules() {
            return Err(PathError::Dimension(
                path.layers(),
                path.modules(),
                self.layers(),
                self.modules(),
            )
            .into());
        }
        Ok(())
    }

    fn dense_forward(g: &mut Graph<'_>, d: Dense, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(d.weight), g.param(d.bias));
        Ok(g.affine(x, w, b)?)
    }

    /// Output `T_{l,m}` of a single module.
    pub fn module_forward(
        &self,
        g: &mut Graph<'_>,
        layer: usize,
        module: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let block = *self.block(layer, module);
        let h = Self::dense_forward(g, block.first, x)?;
        let h = g.relu(h);
        Self::dense_forward(g, block.second, h)
    }

    pub fn skip_forward(&self, g: &mut Graph<'_>, layer: usize, x: NodeId) -> Result<NodeId> {
        match self.skips[layer] {
            Skip::Identity => Ok(x),
            Skip::Projection(d) => Self::dense_forward(g, d, x),
        }
    }

    /// `skip(x) + Σ_m path(l, m) · T_{l,m}`, with each active module scaled
    /// per example by its peak response when `attention` is set. The peak is
    /// treated as a constant during backward.
    pub fn layer_forward(
        &self,
        g: &mut Graph<'_>,
        layer: usize,
        path: &Path,
        x: NodeId,
        attention: bool,
    ) -> Result<NodeId> {
        self.check_path(path)?;
        let mut out = self.skip_forward(g, layer, x)?;
        for m in path.active(layer) {
            let mut t = self.module_forward(g, layer, m, x)?;
            if attention {
                let value = g.value(t);
                let peaks = (0..value.rows())
                    .map(|r| ppr_coefficient(value.row(r)))
                    .collect::<Result<Vec<_>>>()?;
                t = g.row_scale(t, peaks)?;
            }
            out = g.add(out, t)?;
        }
        Ok(out)
    }

    /// Logits `[n, C]` for inputs `[n, input_dim]` along `path`.
    pub fn forward(&self, g: &mut Graph<'_>, path: &Path, x: NodeId) -> Result<NodeId> {
        self.check_path(path)?;
        let cols = g.value(x).cols();
        if cols != self.config.input_dim {
            return Err(TensorError::Dimension {
                op: "forward",
                detail: format!("input width {cols}, expected {}", self.config.input_dim),
            }
            .into());
        }
        let mut h = x;
        for l in 0..self.layers() {
            let attend = self.config.attention && l + 1 == self.config.attention_layer;
            h = self.layer_forward(g, l, path, h, attend)?;
        }
        Self::dense_forward(g, self.classifier, h)
    }

    /// Forward pass without keeping the graph.
    pub fn predict(&self, path: &Path, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, path, input)?;
        Ok(g.value(out).clone())
    }

    /// `frozen := frozen ∨ mask`; frozen module parameters stop receiving
    /// gradients. Skips and the classifier are never frozen.
    pub fn apply_freeze(&mut self, mask: &Path) -> Result<()> {
        self.check_path(mask)?;
        self.frozen = self.frozen.or(mask)?;
        for (l, m) in mask.cells().collect::<Vec<_>>() {
            for id in self.module_params(l, m) {
                self.params.freeze(id);
            }
        }
        Ok(())
    }

    /// Replaces the frozen mask. Only supersets of the current mask are
    /// accepted.
    pub fn set_frozen(&mut self, mask: &Path) -> Result<()> {
        self.check_path(mask)?;
        if !self.frozen.is_subset_of(mask)? {
            return Err(ModelError::UnfreezeUnsupported);
        }
        self.apply_freeze(mask)
    }

    /// Multiply-accumulate count of one forward pass along `path`.
    pub fn macs_per_example(&self, path: &Path) -> u64 {
        let mut total = 0u64;
        for l in 0..self.layers() {
            let (d_in, d_out) = (
                self.config.layer_input_dim(l) as u64,
                self.config.hidden_dims[l] as u64,
            );
            let per_module = d_in * d_out + d_out * d_out;
            total += per_module * path.active(l).count() as u64;
            if !self.skip_is_identity(l) {
                total += d_in * d_out;
            }
        }
        total + (self.config.feature_dim() * self.config.classes()) as u64
    }

    /// Writes config, parameters, frozen mask and `inference_path` as JSON.
    pub fn save_checkpoint(&self, inference_path: &Path, file: &FsPath) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            frozen: self.frozen.clone(),
            inference_path: inference_path.clone(),
            params: self
                .params
                .ids()
                .map(|id| StoredParam {
                    name: self.params.name(id).to_string(),
                    shape: self.params.value(id).shape().to_vec(),
                    data: self.params.value(id).data().to_vec(),
                })
                .collect(),
        };
        let err = |reason: String| ModelError::Checkpoint {
            path: file.display().to_string(),
            reason,
        };
        let json = serde_json::to_string(&ckpt).map_err(|e| err(e.to_string()))?;
        fs::write(file, json).map_err(|e| err(e.to_string()))
    }

    pub fn load_checkpoint(file: &FsPath) -> Result<(Network, Path)> {
        let err = |reason: String| ModelError::Checkpoint {
            path: file.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(file).map_err(|e| err(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "unsupported format {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        // Initialise the layout, then overwrite every tensor.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Network::build(ckpt.config, &mut rng)?;
        if ckpt.params.len() != net.params.len() {
            return Err(err(format!(
                "{} tensors stored, layout has {}",
                ckpt.params.len(),
                net.params.len()
            )));
        }
        for (id, stored) in net.params.ids().collect::<Vec<_>>().into_iter().zip(ckpt.params) {
            if stored.name != net.params.name(id) {
                return Err(err(format!(
                    "tensor {} found where {} expected",
                    stored.name,
                    net.params.name(id)
                )));
            }
            let value = Tensor::new(stored.shape, stored.data)?;
            net.params.set_value(id, value)?;
        }
        net.apply_freeze(&ckpt.frozen)?;
        Ok((net, ckpt.inference_path))
    }
}

const CHECKPOINT_FORMAT: &str = "rpsnet-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: NetworkConfig,
    frozen: Path,
    inference_path: Path,
    params: Vec<StoredParam>,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Peak path response: the largest element of a module output.
pub fn ppr_coefficient(values: &[f64]) -> Result<f64> {
    values.iter().copied().reduce(f64::max).ok_or_else(|| {
        ModelError::Autodiff(
            TensorError::Dimension {
                op: "ppr_coefficient",
                detail: "empty tensor".into(),
            }
            .into(),
        )
    })
}

/// First `k · U` logit columns: the classes seen up to task `k` (one-based).
pub fn masked_logits(logits: &Tensor, task: usize, classes_per_task: usize) -> Result<Tensor> {
    check_task(task, classes_per_task, logits.cols())?;
    Ok(logits.slice_cols(0, task * classes_per_task)?)
}

pub(crate) fn check_task(task: usize, classes_per_task: usize, classes: usize) -> Result<()> {
    if task == 0 || task * classes_per_task > classes {
        return Err(ModelError::Config(format!(
            "task {task} with {classes_per_task} classes per task exceeds {classes} logits"
        )));
    }
    Ok(())
}
