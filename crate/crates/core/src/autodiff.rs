//! Reverse-mode differentiation over a per-forward-pass graph.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only while the forward pass is
//! recorded. [`Graph::backward`] consumes the graph and returns
//! [`Gradients`], which are then folded into the store with
//! [`ParamStore::accumulate`]. Frozen parameters enter the graph as
//! constants, so no gradient is ever produced for them.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{gemm, log_softmax_rows, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward called on {0}")]
    Usage(String),
    #[error("unknown parameter id {0}")]
    UnknownParam(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    frozen: bool,
}

/// Ordered collection of named parameters.
///
/// Values are reference counted so cloning a store (for candidate workers or
/// a distillation snapshot) shares untouched tensors; the first write through
/// [`ParamStore::value_mut`] copies.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value),
            grad: None,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(id.0)
            .ok_or(AutodiffError::UnknownParam(id.0))?;
        if entry.value.shape() != value.shape() {
            return Err(TensorError::Dimension {
                op: "set_value",
                detail: format!("{:?} vs {:?}", entry.value.shape(), value.shape()),
            }
            .into());
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    /// Accumulated gradient, if any backward pass reached this parameter.
    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    /// Gradient with absent entries materialised as zeros.
    pub fn grad_or_zeros(&self, id: ParamId) -> Tensor {
        let entry = &self.entries[id.0];
        entry
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(entry.value.shape()))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezing is one-way; any pending gradient is discarded.
    pub fn freeze(&mut self, id: ParamId) {
        let entry = &mut self.entries[id.0];
        entry.frozen = true;
        entry.grad = None;
    }

    pub fn zero_grad(&mut self) {
        for entry in &mut self.entries {
            entry.grad = None;
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.by_param {
            let entry = self
                .entries
                .get_mut(id.0)
                .ok_or(AutodiffError::UnknownParam(id.0))?;
            if entry.frozen {
                continue;
            }
            match &mut entry.grad {
                Some(acc) => acc.add_assign(g)?,
                None => entry.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// True when both stores hold the same tensor allocation for `id`.
    pub fn shares_value(&self, other: &ParamStore, id: ParamId) -> bool {
        Arc::ptr_eq(&self.entries[id.0].value, &other.entries[id.0].value)
    }
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    RowScale { x: NodeId, scale: Vec<f64> },
    SliceCols { x: NodeId, start: usize },
    LogSoftmax { x: NodeId, temperature: f64 },
    WeightedSum { x: NodeId, weights: Tensor },
    Linear { terms: Vec<(NodeId, f64)> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` only for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Operations recorded during one forward pass.
pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(p), None) => self.params.value(*p),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op: Op,
        value: Tensor,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        value.ensure_finite(name)?;
        Ok(self.push(op, Some(value), requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, Some(value), false)
    }

    /// Leaf for a stored parameter; frozen parameters behave as constants.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let trainable = !self.params.is_frozen(id);
        self.push(Op::Param(id), None, trainable)
    }

    /// `x · w + b` for `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, d_in) = (xv.rows(), xv.cols());
        let (w_in, d_out) = (wv.rows(), wv.cols());
        if d_in != w_in || bv.len() != d_out || wv.shape().len() != 2 {
            return Err(TensorError::Dimension {
                op: "affine",
                detail: format!(
                    "x {:?}, w {:?}, b {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            }
            .into());
        }
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(n, d_in, d_out, 1.0, xv.data(), false, wv.data(), false, 1.0, &mut out);
        let requires = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let value = Tensor::matrix(n, d_out, out)?;
        self.push_checked(Op::Affine { x, w, b }, value, requires, "affine")
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        let requires = self.requires_grad(x);
        self.push(Op::Relu(x), Some(value), requires)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let requires = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(Op::Add(a, b), value, requires, "add")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::Dimension {
                op: "mul",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            }
            .into());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let requires = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(Op::Mul(a, b), value, requires, "mul")
    }

    /// Multiplies row `i` of `x` by the constant `scale[i]`.
    pub fn row_scale(&mut self, x: NodeId, scale: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if scale.len() != xv.rows() {
            return Err(TensorError::Dimension {
                op: "row_scale",
                detail: format!("{} scales for {} rows", scale.len(), xv.rows()),
            }
            .into());
        }
        let cols = xv.cols();
        let mut value = xv.clone();
        for (r, s) in scale.iter().enumerate() {
            for v in &mut value.data_mut()[r * cols..(r + 1) * cols] {
                *v *= s;
            }
        }
        let requires = self.requires_grad(x);
        self.push_checked(Op::RowScale { x, scale }, value, requires, "row_scale")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let value = self.value(x).slice_cols(start, end)?;
        let requires = self.requires_grad(x);
        Ok(self.push(Op::SliceCols { x, start }, Some(value), requires))
    }

    /// Row-wise `log(softmax(x / temperature))`.
    pub fn log_softmax(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(AutodiffError::Usage(format!(
                "log_softmax with temperature {temperature}"
            )));
        }
        let value = log_softmax_rows(self.value(x), temperature);
        let requires = self.requires_grad(x);
        self.push_checked(
            Op::LogSoftmax { x, temperature },
            value,
            requires,
            "log_softmax",
        )
    }

    /// Scalar `Σ weights ⊙ x`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(TensorError::Dimension {
                op: "weighted_sum",
                detail: format!("{:?} vs {:?}", xv.shape(), weights.shape()),
            }
            .into());
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let requires = self.requires_grad(x);
        self.push_checked(
            Op::WeightedSum { x, weights },
            Tensor::scalar(s),
            requires,
            "weighted_sum",
        )
    }

    /// Scalar `bias + Σ coef_i · term_i` over scalar nodes.
    pub fn linear(&mut self, terms: Vec<(NodeId, f64)>, bias: f64) -> Result<NodeId> {
        let mut s = bias;
        for (id, c) in &terms {
            let v = self.value(*id);
            if v.len() != 1 {
                return Err(TensorError::Dimension {
                    op: "linear",
                    detail: format!("term of shape {:?} is not scalar", v.shape()),
                }
                .into());
            }
            s += c * v.data()[0];
        }
        let requires = terms.iter().any(|(id, _)| self.requires_grad(*id));
        self.push_checked(Op::Linear { terms }, Tensor::scalar(s), requires, "linear")
    }

    /// Propagates d(loss)/d(node) back to every trainable parameter leaf.
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(AutodiffError::Usage(
                "a node that was not recorded on this graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Usage(format!(
                "non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(p) => {
                    out.by_param.insert(*p, g);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.cols());
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; n * d_in];
                        gemm(n, d_out, d_in, 1.0, g.data(), false, wv.data(), true, 0.0, &mut dx);
                        accumulate(&mut grads, *x, Tensor::matrix(n, d_in, dx)?)?;
                    }
                    if self.requires_grad(*w) {
                        let mut dw = vec![0.0; d_in * d_out];
                        gemm(d_in, n, d_out, 1.0, xv.data(), true, g.data(), false, 0.0, &mut dw);
                        accumulate(&mut grads, *w, Tensor::matrix(d_in, d_out, dw)?)?;
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; d_out];
                        for r in 0..n {
                            for (acc, v) in db.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::new(shape, db)?)?;
                    }
                }
                Op::Relu(x) => {
                    let y = self.nodes[idx].value.as_ref().expect("relu value");
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    let times = |other: NodeId| -> Result<Tensor> {
                        let ov = self.value(other);
                        let data = g.data().iter().zip(ov.data()).map(|(x, y)| x * y).collect();
                        Ok(Tensor::new(ov.shape().to_vec(), data)?)
                    };
                    if self.requires_grad(*a) {
                        let da = times(*b)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.requires_grad(*b) {
                        let db = times(*a)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::RowScale { x, scale } => {
                    let cols = g.cols();
                    let mut dx = g;
                    for (r, s) in scale.iter().enumerate() {
                        for v in &mut dx.data_mut()[r * cols..(r + 1) * cols] {
                            *v *= s;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let width = g.cols();
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        dx.data_mut()[r * cols + start..r * cols + start + width]
                            .copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LogSoftmax { x, temperature } => {
                    // dx = (g - softmax * rowsum(g)) / t
                    let y = self.nodes[idx].value.as_ref().expect("log_softmax value");
                    let cols = y.cols();
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(y.row(r)) {
                            *d = (gv - yv.exp() * total) / temperature;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.data()[0];
                    let shape = self.value(*x).shape().to_vec();
                    let dx = Tensor::new(shape, weights.data().iter().map(|w| w * s).collect())?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Linear { terms } => {
                    let s = g.data()[0];
                    for (id, c) in terms {
                        if self.requires_grad(*id) {
                            accumulate(&mut grads, *id, Tensor::scalar(c * s))?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Compares backward-pass gradients with central differences of step `h`.
///
/// `loss` records a scalar on the supplied graph. At most `samples` entries
/// per trainable parameter are probed (all when `None`). Returns the max of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F, R>(
    params: &mut ParamStore,
    h: f64,
    samples: Option<usize>,
    rng: &mut R,
    loss: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
    R: Rng + ?Sized,
{
    if h <= 0.0 {
        return Err(AutodiffError::Usage(format!("grad_check with step {h}")));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let out = loss(&mut g)?;
        g.backward(out)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        if params.is_frozen(id) {
            continue;
        }
        let n = params.value(id).len();
        let picks: Vec<usize> = match samples {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let original = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = original + h;
            let plus = eval(params)?;
            params.value_mut(id).data_mut()[i] = original - h;
            let minus = eval(params)?;
            params.value_mut(id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
