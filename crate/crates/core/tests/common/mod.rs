#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpsnet::autodiff::{grad_check, Graph, NodeId, ParamId, ParamStore};
use rpsnet::data::TaskStream;
use rpsnet::harness::{load_stream, parse_config_str, ExperimentConfig};
use rpsnet::model::{Network, NetworkConfig};
use rpsnet::objective::{controller_phi, cross_entropy_seen, distillation_kl, total_loss, ControllerConfig};
use rpsnet::path::{frozen_mask, sample_training_path, trainable_portion, Path};
use rpsnet::saturation::{saturation_coefficient, FisherAccumulator, FisherSample, LayerSets};
use rpsnet::tensor::Tensor;
use rpsnet::trainer::{run_task, RunState};

pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst relative finite-difference error over a chain using every graph op.
pub fn op_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let w = store.add("w", random_tensor(&mut r, &[4, 3]));
    let b = store.add("b", random_tensor(&mut r, &[3]));
    let v = store.add("v", random_tensor(&mut r, &[3, 3]));
    let x = random_tensor(&mut r, &[3, 4]);
    let weights = random_tensor(&mut r, &[3, 2]);
    let scale: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
    let temperature = r.random_range(0.5..3.0);
    let f = |g: &mut Graph<'_>| {
        let xn = g.constant(x.clone());
        let (wn, bn) = (g.param(w), g.param(b));
        let h = g.affine(xn, wn, bn)?;
        let a = g.relu(h);
        let vn = g.param(v);
        let m = g.mul(a, vn)?;
        let s = g.row_scale(m, scale.clone())?;
        let sum = g.add(s, h)?;
        let cut = g.slice_cols(sum, 1, 3)?;
        let ls = g.log_softmax(cut, temperature)?;
        let ws = g.weighted_sum(ls, weights.clone())?;
        let other = g.weighted_sum(a, Tensor::new(vec![3, 3], vec![0.3; 9])?)?;
        g.linear(vec![(ws, 1.5), (other, -0.5)], 0.25)
    };
    grad_check(&mut store, 1e-6, None, &mut r, f).unwrap()
}

pub fn small_network(seed: u64, tasks: usize, attention: bool) -> Network {
    let cfg = NetworkConfig {
        input_dim: 3,
        hidden_dims: vec![5, 5],
        modules: 2,
        tasks,
        classes_per_task: 2,
        attention,
        attention_layer: 2,
    };
    Network::build(cfg, &mut rng(seed)).unwrap()
}

pub enum LossKind {
    CrossEntropy,
    Distillation,
    Total { phi: f64 },
}

/// Worst relative finite-difference error of a loss over every trainable
/// parameter of a small two-layer network.
pub fn loss_grad_error(seed: u64, kind: LossKind) -> f64 {
    let mut r = rng(seed);
    let mut net = small_network(seed, 2, false);
    let path = Path::ones(2, 2);
    let x = random_tensor(&mut r, &[4, 3]);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..4)).collect();
    let prev = random_tensor(&mut r, &[4, 4]).map(|v| 3.0 * v);
    let temperature = 2.0;
    let net_ref = net.clone();
    let f = |g: &mut Graph<'_>| -> rpsnet::autodiff::Result<NodeId> {
        let xn = g.constant(x.clone());
        let logits = net_ref.forward(g, &path, xn).map_err(to_autodiff)?;
        let ce = cross_entropy_seen(g, logits, &labels, 2, 2).map_err(to_autodiff)?;
        let kl = distillation_kl(g, logits, &prev, 2, 2, temperature)
            .map_err(to_autodiff)?
            .expect("task 2 has old classes");
        match kind {
            LossKind::CrossEntropy => Ok(ce),
            LossKind::Distillation => Ok(kl),
            LossKind::Total { phi } => total_loss(g, ce, Some(kl), phi).map_err(to_autodiff),
        }
    };
    grad_check(net.params_mut(), 1e-6, None, &mut r, f).unwrap()
}

fn to_autodiff<E: std::fmt::Display>(e: E) -> rpsnet::autodiff::AutodiffError {
    rpsnet::autodiff::AutodiffError::Usage(e.to_string())
}

/// Every `layers × modules` binary matrix.
pub fn all_paths(layers: usize, modules: usize) -> Vec<Path> {
    let cells = layers * modules;
    (0..1u32 << cells)
        .map(|bits| {
            let rows: Vec<Vec<u8>> = (0..layers)
                .map(|l| (0..modules).map(|m| ((bits >> (l * modules + m)) & 1) as u8).collect())
                .collect();
            Path::from_rows(&rows).unwrap()
        })
        .collect()
}

fn cellwise(a: &Path, b: &Path, f: impl Fn(bool, bool) -> bool) -> Path {
    let rows: Vec<Vec<u8>> = (0..a.layers())
        .map(|l| (0..a.modules()).map(|m| u8::from(f(a.get(l, m), b.get(l, m)))).collect())
        .collect();
    Path::from_rows(&rows).unwrap()
}

/// Checks the logical operations, their laws, `trainable_portion` and
/// `frozen_mask` on every pair of paths of the given shape against a
/// cell-by-cell oracle. Returns the number of pairs checked.
pub fn exhaustive_path_algebra(layers: usize, modules: usize) -> Result<usize, String> {
    let paths = all_paths(layers, modules);
    let zeros = Path::zeros(layers, modules);
    let mut pairs = 0;
    for a in &paths {
        if a.or(a).unwrap() != *a || a.and(a).unwrap() != *a || !a.xor(a).unwrap().is_zero() {
            return Err(format!("idempotence fails on {:?}", a.to_rows()));
        }
        if a.or(&zeros).unwrap() != *a || !a.and(&zeros).unwrap().is_zero() {
            return Err(format!("identity fails on {:?}", a.to_rows()));
        }
        for b in &paths {
            pairs += 1;
            let or = a.or(b).unwrap();
            let and = a.and(b).unwrap();
            let xor = a.xor(b).unwrap();
            if or != cellwise(a, b, |x, y| x || y)
                || and != cellwise(a, b, |x, y| x && y)
                || xor != cellwise(a, b, |x, y| x != y)
            {
                return Err(format!("cellwise mismatch on {:?} {:?}", a.to_rows(), b.to_rows()));
            }
            if or != b.or(a).unwrap() || and != b.and(a).unwrap() || xor != b.xor(a).unwrap() {
                return Err("commutativity".into());
            }
            if a.and(&or).unwrap() != *a || a.or(&and).unwrap() != *a {
                return Err("absorption".into());
            }
            if xor != or.xor(&and).unwrap() {
                return Err("xor is not or minus and".into());
            }
            if or.popcount() + and.popcount() != a.popcount() + b.popcount() {
                return Err("inclusion-exclusion".into());
            }
            let portion = trainable_portion(a, b).unwrap();
            if !portion.and(b).unwrap().is_zero() {
                return Err("trainable portion overlaps trained modules".into());
            }
            if portion != cellwise(a, b, |x, y| x && !y) {
                return Err("trainable portion".into());
            }
            if frozen_mask(b, a).unwrap() != cellwise(b, a, |x, y| x != y) {
                return Err("frozen mask".into());
            }
        }
    }
    Ok(pairs)
}

/// Samples `draws` training paths for every shape up to `max`×`max`,
/// checking one-hot rows and that every one-hot path occurs.
pub fn sampling_covers_one_hot_paths(max: usize, draws: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for layers in 1..=max {
        for modules in 1..=max {
            let expected: Vec<Path> = all_paths(layers, modules)
                .into_iter()
                .filter(Path::has_one_hot_rows)
                .collect();
            if expected.len() != modules.pow(layers as u32) {
                return Err(format!("{layers}x{modules}: {} one-hot paths", expected.len()));
            }
            let mut seen = BTreeMap::new();
            for _ in 0..draws {
                let p = sample_training_path(layers, modules, &mut r).unwrap();
                if !p.has_one_hot_rows() {
                    return Err(format!("{layers}x{modules}: sampled {:?}", p.to_rows()));
                }
                *seen.entry(p.to_rows()).or_insert(0usize) += 1;
            }
            if seen.len() != expected.len() {
                return Err(format!(
                    "{layers}x{modules}: {} of {} paths seen",
                    seen.len(),
                    expected.len()
                ));
            }
        }
    }
    Ok(())
}

pub fn random_sample(r: &mut ChaCha8Rng, shapes: &[usize]) -> FisherSample {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let v: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0f64).powi(3)).collect();
            (ParamId(i), Tensor::vector(v))
        })
        .collect()
}

/// `ln(mean late trace / mean early trace)` summed entry by entry.
pub fn direct_mu(acc: &FisherAccumulator, early: &[ParamId], late: &[ParamId]) -> f64 {
    let mass = |ids: &[ParamId]| {
        let mut total = 0.0;
        for id in ids {
            for v in acc.get(*id).unwrap().data() {
                total += v;
            }
        }
        total / ids.len() as f64
    };
    (mass(late) / mass(early)).ln()
}

/// Fisher accumulator properties on random samples: nonnegativity,
/// monotone folding, order independence, the direct-summation oracle, a
/// balanced accumulator and scale invariance.
pub fn fisher_properties(seed: u64, samples: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let shapes = [3, 4, 2, 5];
    let draws: Vec<FisherSample> = (0..samples).map(|_| random_sample(&mut r, &shapes)).collect();
    let mut acc = FisherAccumulator::new();
    let mut previous: Option<FisherAccumulator> = None;
    for d in &draws {
        acc.fold_max(d).map_err(|e| e.to_string())?;
        for (_, t) in acc.iter() {
            if t.data().iter().any(|v| *v < 0.0) {
                return Err("negative Fisher entry".into());
            }
        }
        if let Some(p) = &previous {
            for (id, t) in p.iter() {
                let now = acc.get(id).unwrap();
                if t.data().iter().zip(now.data()).any(|(a, b)| b < a) {
                    return Err("folding decreased an entry".into());
                }
            }
        }
        previous = Some(acc.clone());
    }
    let mut reversed = FisherAccumulator::new();
    for d in draws.iter().rev() {
        reversed.fold_max(d).map_err(|e| e.to_string())?;
    }
    let mut halves = (FisherAccumulator::new(), FisherAccumulator::new());
    for (i, d) in draws.iter().enumerate() {
        let h = if i % 2 == 0 { &mut halves.0 } else { &mut halves.1 };
        h.fold_max(d).map_err(|e| e.to_string())?;
    }
    halves.1.merge(&halves.0).map_err(|e| e.to_string())?;
    for (id, t) in acc.iter() {
        if reversed.get(id).unwrap().data() != t.data() || halves.1.get(id).unwrap().data() != t.data() {
            return Err("fold order changed the accumulator".into());
        }
    }

    let early = vec![ParamId(0), ParamId(1)];
    let late = vec![ParamId(2), ParamId(3)];
    let sets = LayerSets::new(early.clone(), late.clone()).map_err(|e| e.to_string())?;
    let mu = saturation_coefficient(&acc, &sets).mu.ok_or("undefined coefficient")?;
    let oracle = direct_mu(&acc, &early, &late);
    if (mu - oracle).abs() > 1e-12 * oracle.abs().max(1.0) {
        return Err(format!("coefficient {mu} vs direct summation {oracle}"));
    }
    for c in [1e-3, 1e3] {
        let mut scaled = FisherAccumulator::new();
        let sample: FisherSample = acc.iter().map(|(id, t)| (id, t.map(|v| c * v))).collect();
        scaled.fold_max(&sample).map_err(|e| e.to_string())?;
        let s = saturation_coefficient(&scaled, &sets).mu.ok_or("undefined coefficient")?;
        if (s - mu).abs() > 1e-9 {
            return Err(format!("scaling by {c}: {s} vs {mu}"));
        }
    }

    // Early and late sets with the same per-tensor traces.
    let v: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1.0)).collect();
    let mut w = v.clone();
    w.reverse();
    let balanced: FisherSample = [
        (ParamId(0), Tensor::vector(v.clone())),
        (ParamId(1), Tensor::vector(w.clone())),
        (ParamId(2), Tensor::vector(w)),
        (ParamId(3), Tensor::vector(v)),
    ]
    .into_iter()
    .collect();
    let mut bal = FisherAccumulator::new();
    bal.fold_max(&balanced).map_err(|e| e.to_string())?;
    let m = saturation_coefficient(&bal, &sets).mu.ok_or("undefined coefficient")?;
    if m != 0.0 {
        return Err(format!("balanced accumulator gives {m}"));
    }
    Ok(())
}

/// `φ(k) = 1` for `k ≤ S_0` and `φ(S_0 + j) = j γ` bit for bit.
pub fn controller_exact(gammas: &[f64], max_task: usize) -> Result<(), String> {
    for &gamma in gammas {
        for s0 in 0..max_task {
            let cfg = ControllerConfig {
                gamma,
                temperature: 2.0,
                first_switch: Some(s0),
            };
            for k in 1..=max_task {
                let phi = controller_phi(k, &cfg);
                let expected = if k <= s0 { 1.0 } else { (k - s0) as f64 * gamma };
                if phi.to_bits() != expected.to_bits() {
                    return Err(format!("phi({k}) with S_0 = {s0}, gamma = {gamma}: {phi}"));
                }
            }
        }
        let none = ControllerConfig {
            gamma,
            temperature: 2.0,
            first_switch: None,
        };
        if (1..=max_task).any(|k| controller_phi(k, &none) != 1.0) {
            return Err("phi before any switch differs from 1".into());
        }
    }
    Ok(())
}

pub fn synthetic_config(tasks: usize, extra_trainer: &str, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"
seed = {seed}
tasks = {tasks}
classes_per_task = 2
[dataset]
kind = "synthetic"
dim = 8
train_per_class = 60
test_per_class = 30
separation = 2.0
[network]
hidden_dims = [12, 12]
modules = 4
[trainer]
candidates = 2
epochs = 3
batch_size = 16
{extra_trainer}
[memory]
budget = 60
"#
    );
    parse_config_str(&text).unwrap()
}

pub struct RunTrace {
    pub state: RunState,
    pub stream: TaskStream,
    pub inference_paths: Vec<Path>,
    pub train_paths: Vec<Path>,
    /// Module weights at the moment each module was first frozen.
    pub frozen_at: BTreeMap<(usize, usize), Vec<Tensor>>,
}

fn module_values(net: &Network, l: usize, m: usize) -> Vec<Tensor> {
    net.module_params(l, m)
        .iter()
        .map(|&id| net.params().value(id).clone())
        .collect()
}

/// Runs `cfg` task by task, checking after every task that every frozen
/// module still holds bit for bit the weights it had when it was frozen.
pub fn traced_run(cfg: &ExperimentConfig) -> Result<RunTrace, String> {
    let stream = load_stream(cfg).map_err(|e| e.to_string())?;
    let trainer = cfg.trainer_config();
    let mut state = RunState::new(cfg.network_config(), &trainer).map_err(|e| e.to_string())?;
    let (layers, modules) = (state.network.layers(), state.network.modules());
    let mut trace = RunTrace {
        state: state.clone(),
        stream: stream.clone(),
        inference_paths: Vec::new(),
        train_paths: Vec::new(),
        frozen_at: BTreeMap::new(),
    };
    for k in 1..=cfg.tasks {
        let before: BTreeMap<(usize, usize), Vec<Tensor>> = (0..layers)
            .flat_map(|l| (0..modules).map(move |m| (l, m)))
            .map(|(l, m)| ((l, m), module_values(&state.network, l, m)))
            .collect();
        let was_frozen = state.network.frozen().clone();
        run_task(&mut state, &stream, k, &trainer).map_err(|e| e.to_string())?;
        for (l, m) in state.network.frozen().cells().collect::<Vec<_>>() {
            if !was_frozen.get(l, m) {
                trace.frozen_at.insert((l, m), before[&(l, m)].clone());
            }
        }
        for (&(l, m), values) in &trace.frozen_at {
            let now = module_values(&state.network, l, m);
            let same = now
                .iter()
                .zip(values)
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            if !same {
                return Err(format!("module ({l}, {m}) changed after freezing, task {k}"));
            }
        }
        trace.inference_paths.push(state.inference_path.clone());
        trace
            .train_paths
            .push(state.train_path.clone().ok_or("no training path after a task")?);
    }
    trace.state = state;
    Ok(trace)
}

/// `P^ts` never loses modules, stays within `L·M`, equals the OR of all
/// selected training paths and each task adds at most `L` modules.
pub fn inference_path_monotone(trace: &RunTrace) -> Result<(), String> {
    let first = &trace.inference_paths[0];
    let (layers, modules) = (first.layers(), first.modules());
    let mut union = Path::zeros(layers, modules);
    let mut previous = Path::zeros(layers, modules);
    for (k, (p, t)) in trace.inference_paths.iter().zip(&trace.train_paths).enumerate() {
        union = union.or(t).unwrap();
        if *p != union {
            return Err(format!("task {}: inference path is not the union of training paths", k + 1));
        }
        if p.popcount() < previous.popcount() || !previous.is_subset_of(p).unwrap() {
            return Err(format!("task {}: inference path shrank", k + 1));
        }
        if p.popcount() > layers * modules {
            return Err(format!("task {}: popcount above L·M", k + 1));
        }
        if p.popcount() - previous.popcount() > layers {
            return Err(format!("task {}: more than L new modules", k + 1));
        }
        previous = p.clone();
    }
    Ok(())
}
