//! Dense feed-forward classifiers trained with softmax cross-entropy and Adam.
//!
//! Weights are stored per layer as an `out_dim × in_dim` row-major matrix
//! plus a bias vector. The first layer skips zero inputs, which keeps the
//! mostly-empty TF baseline input cheap without a separate sparse code path.
//!
//! Per-example backpropagation may run in parallel, but gradients are always
//! accumulated sequentially in batch order so results are bit-identical with
//! and without the `parallel` feature.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PairExample;
use crate::{par, Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FCNN";
const CHECKPOINT_VERSION: u16 = 1;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Softmax,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Softmax => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Softmax),
            c => Err(Error::format("checkpoint", format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// `out_dim × in_dim`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            activation,
            weights,
            biases: vec![0.0; out_dim],
        }
    }

    fn affine_sparse(&self, input: &[(usize, f64)]) -> Vec<f64> {
        let mut z = vec![0.0; self.out_dim];
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &self.weights[i * self.in_dim..(i + 1) * self.in_dim];
            let mut acc = 0.0;
            for &(j, x) in input {
                acc += row[j] * x;
            }
            *zi = acc + self.biases[i];
        }
        z
    }

    fn affine_dense(&self, input: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.out_dim];
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &self.weights[i * self.in_dim..(i + 1) * self.in_dim];
            let acc: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            *zi = acc + self.biases[i];
        }
        z
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z[k] - max - lse
}

fn activate(activation: Activation, z: Vec<f64>) -> Vec<f64> {
    match activation {
        Activation::Tanh => z.into_iter().map(f64::tanh).collect(),
        Activation::Relu => z.into_iter().map(|v| v.max(0.0)).collect(),
        Activation::Softmax => softmax(&z),
    }
}

pub(crate) fn nonzero_entries(input: &[f64]) -> Vec<(usize, f64)> {
    input
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != 0.0)
        .map(|(i, &x)| (i, x))
        .collect()
}

/// Per-example forward trace: pre-activations and activations of each layer.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    /// Tensors in the same order as [`DenseNet::parameters_mut`].
    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    seed: u64,
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases. `shape` lists `(out_dim, activation)`
    /// per layer; the last must be `(2, Softmax)`.
    pub fn new(input_dim: usize, shape: &[(usize, Activation)], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(shape.len());
        let mut in_dim = input_dim;
        for &(out_dim, act) in shape {
            layers.push(Layer::glorot(in_dim, out_dim, act, &mut rng));
            in_dim = out_dim;
        }
        Self::from_layers(layers, seed)
    }

    pub fn zeros(input_dim: usize, shape: &[(usize, Activation)]) -> Result<Self> {
        let mut layers = Vec::with_capacity(shape.len());
        let mut in_dim = input_dim;
        for &(out_dim, act) in shape {
            layers.push(Layer::zeros(in_dim, out_dim, act));
            in_dim = out_dim;
        }
        Self::from_layers(layers, 0)
    }

    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        };
        if last.activation != Activation::Softmax || last.out_dim != NUM_CLASSES {
            return Err(Error::InvalidArgument(
                "final layer must be a 2-way softmax".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.biases.len() != l.out_dim {
                return Err(Error::InvalidArgument(format!("layer {i} parameter shape mismatch")));
            }
            if i + 1 < layers.len() && l.activation == Activation::Softmax {
                return Err(Error::InvalidArgument("softmax is only allowed on the final layer".into()));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].out_dim,
                    actual: l.in_dim,
                });
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("weights"));
            }
        }
        Ok(Self { layers, seed })
    }

    /// 50 / 20 / 2 with tanh hidden layers over the 10,001-wide TF features.
    pub fn tfidf_baseline(input_dim: usize, seed: u64) -> Result<Self> {
        Self::new(
            input_dim,
            &[(50, Activation::Tanh), (20, Activation::Tanh), (2, Activation::Softmax)],
            seed,
        )
    }

    /// 200 / 100 / 50 / 2 with relu hidden layers over concatenated sentence vectors.
    pub fn wordvec_baseline(input_dim: usize, seed: u64) -> Result<Self> {
        Self::new(
            input_dim,
            &[
                (200, Activation::Relu),
                (100, Activation::Relu),
                (50, Activation::Relu),
                (2, Activation::Softmax),
            ],
            seed,
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// `[W0, b0, W1, b1, ...]`.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    pub fn parameter_shapes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.biases.len()])
            .collect()
    }

    fn trace(&self, input: &[(usize, f64)]) -> Result<Trace> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = if i == 0 {
                layer.affine_sparse(input)
            } else {
                layer.affine_dense(&post[i - 1])
            };
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("pre-activation"));
            }
            let a = activate(layer.activation, z.clone());
            pre.push(z);
            post.push(a);
        }
        Ok(Trace { pre, post })
    }

    fn check_input(&self, input: &[(usize, f64)]) -> Result<()> {
        let dim = self.input_dim();
        if let Some(&(j, _)) = input.iter().find(|(j, _)| *j >= dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: j + 1,
            });
        }
        Ok(())
    }

    pub(crate) fn forward_entries(&self, input: &[(usize, f64)]) -> Result<[f64; NUM_CLASSES]> {
        self.check_input(input)?;
        let trace = self.trace(input)?;
        let out = trace.post.last().expect("at least one layer");
        Ok([out[0], out[1]])
    }

    /// Class probabilities for a dense input.
    pub fn forward(&self, input: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("input"));
        }
        self.forward_entries(&nonzero_entries(input))
    }

    /// Probability of class 1.
    pub fn predict_prob(&self, features: &[f64]) -> Result<f64> {
        Ok(self.forward(features)?[1])
    }

    /// Loss and deltas for one example; deltas[l] is dLoss/dz for layer l.
    fn backprop(&self, input: &[(usize, f64)], label: usize) -> Result<(f64, Vec<Vec<f64>>, Trace)> {
        let trace = self.trace(input)?;
        let n = self.layers.len();
        let loss = -log_softmax_at(&trace.pre[n - 1], label);
        let mut deltas = vec![Vec::new(); n];
        let mut delta: Vec<f64> = trace.post[n - 1].clone();
        delta[label] -= 1.0;
        for l in (0..n).rev() {
            if l > 0 {
                let layer = &self.layers[l];
                let below = &self.layers[l - 1];
                let mut back = vec![0.0; layer.in_dim];
                for (i, d) in delta.iter().enumerate() {
                    let row = &layer.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += w * d;
                    }
                }
                match below.activation {
                    Activation::Tanh => {
                        for (b, a) in back.iter_mut().zip(&trace.post[l - 1]) {
                            *b *= 1.0 - a * a;
                        }
                    }
                    Activation::Relu => {
                        for (b, z) in back.iter_mut().zip(&trace.pre[l - 1]) {
                            if *z <= 0.0 {
                                *b = 0.0;
                            }
                        }
                    }
                    Activation::Softmax => unreachable!("softmax only on the final layer"),
                }
                deltas[l] = std::mem::replace(&mut delta, back);
            } else {
                deltas[0] = std::mem::take(&mut delta);
            }
        }
        Ok((loss, deltas, trace))
    }

    pub(crate) fn loss_and_grad_entries(&self, batch: &[(&[(usize, f64)], usize)]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for (input, label) in batch {
            if *label >= NUM_CLASSES {
                return Err(Error::InvalidArgument(format!("label {label} out of range")));
            }
            self.check_input(input)?;
        }
        let per_example = par::map(batch, |(input, label)| self.backprop(input, *label));

        let mut grads = Gradients::zeros_like(self);
        let mut total = 0.0;
        for ((input, _), result) in batch.iter().zip(per_example) {
            let (loss, deltas, trace) = result?;
            total += loss;
            for (l, (layer, g)) in self.layers.iter().zip(grads.layers.iter_mut()).enumerate() {
                let delta = &deltas[l];
                for (gb, d) in g.biases.iter_mut().zip(delta) {
                    *gb += d;
                }
                if l == 0 {
                    for (i, d) in delta.iter().enumerate() {
                        let row = &mut g.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
                        for &(j, x) in input.iter() {
                            row[j] += d * x;
                        }
                    }
                } else {
                    let below = &trace.post[l - 1];
                    for (i, d) in delta.iter().enumerate() {
                        let row = &mut g.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
                        for (w, a) in row.iter_mut().zip(below) {
                            *w += d * a;
                        }
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in &mut grads.layers {
            g.weights.iter_mut().chain(g.biases.iter_mut()).for_each(|v| *v *= scale);
        }
        Ok((total * scale, grads))
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Gradients)> {
        let mut entries = Vec::with_capacity(batch.len());
        for (input, label) in batch {
            if input.len() != self.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim(),
                    actual: input.len(),
                });
            }
            entries.push((nonzero_entries(input), *label));
        }
        let refs: Vec<(&[(usize, f64)], usize)> = entries.iter().map(|(e, l)| (e.as_slice(), *l)).collect();
        self.loss_and_grad_entries(&refs)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim as u32).to_le_bytes())?;
            w.write_all(&[l.activation.code()])?;
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.biases) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::format("checkpoint", e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut b2 = [0u8; 2];
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b2).map_err(bad)?;
        let version = u16::from_le_bytes(b2);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4).map_err(bad)?;
        let count = u32::from_le_bytes(b4) as usize;
        if count == 0 || count > 64 {
            return Err(Error::format("checkpoint", format!("implausible layer count {count}")));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b4).map_err(bad)?;
            let in_dim = u32::from_le_bytes(b4) as usize;
            r.read_exact(&mut b4).map_err(bad)?;
            let out_dim = u32::from_le_bytes(b4) as usize;
            let mut code = [0u8; 1];
            r.read_exact(&mut code).map_err(bad)?;
            dims.push((in_dim, out_dim, Activation::from_code(code[0])?));
        }
        let mut layers = Vec::with_capacity(count);
        for (in_dim, out_dim, activation) in dims {
            let mut read_vec = |n: usize| -> Result<Vec<f64>> {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    r.read_exact(&mut b8).map_err(bad)?;
                    v.push(f64::from_le_bytes(b8));
                }
                Ok(v)
            };
            let weights = read_vec(in_dim * out_dim)?;
            let biases = read_vec(out_dim)?;
            layers.push(Layer {
                in_dim,
                out_dim,
                activation,
                weights,
                biases,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(bad)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Self::from_layers(layers, 0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(self.parameter_count() * 8 + 64);
        self.write_checkpoint(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_net(net: &DenseNet, lr: f64) -> Self {
        Self::new(&net.parameter_shapes(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    expected: m.len(),
                    actual: if p.len() != m.len() { p.len() } else { g.len() },
                });
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        let g = grads.as_slices();
        self.step(&mut net.parameters_mut(), &g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many epochs without validation-loss improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            shuffle: true,
            patience: Some(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    pub steps: usize,
    /// Epoch (0-based) whose weights were kept when validation was used.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

type Featurized = (Vec<(usize, f64)>, usize);

fn featurize_all<F>(pairs: &[PairExample], featurize: &F) -> Result<Vec<Featurized>>
where
    F: Fn(&PairExample) -> Result<Vec<f64>> + Sync,
{
    par::try_map(pairs, |p| featurize(p).map(|x| (nonzero_entries(&x), p.label as usize)))
        .map_err(|(i, e)| Error::at(i, e))
}

fn mean_loss(net: &DenseNet, data: &[Featurized], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().map(|(e, l)| (e.as_slice(), *l)).collect();
        let (loss, _) = net.loss_and_grad_entries(&refs)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Mini-batch training with a seeded per-epoch shuffle.
///
/// When `validation` is non-empty and `config.patience` is set, training
/// stops after that many epochs without improvement and the best weights are
/// restored.
pub fn train<F>(
    net: &mut DenseNet,
    pairs: &[PairExample],
    validation: &[PairExample],
    featurize: F,
    config: &TrainConfig,
) -> Result<TrainReport>
where
    F: Fn(&PairExample) -> Result<Vec<f64>> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    if !(config.lr > 0.0) || config.batch_size == 0 {
        return Err(Error::InvalidArgument("lr must be > 0 and batch_size >= 1".into()));
    }
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        validation_losses: Vec::new(),
        steps: 0,
        best_epoch: None,
        stopped_early: false,
    };
    if config.epochs == 0 {
        return Ok(report);
    }
    let data = featurize_all(pairs, &featurize)?;
    let val = featurize_all(validation, &featurize)?;

    let mut adam = AdamState::for_net(net, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best: Option<(f64, DenseNet)> = None;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<_> = batch_idx.iter().map(|&i| (data[i].0.as_slice(), data[i].1)).collect();
            let (loss, grads) = net.loss_and_grad_entries(&batch)?;
            adam.step_net(net, &grads)?;
            total += loss * batch.len() as f64;
            report.steps += 1;
        }
        report.epoch_losses.push(total / data.len() as f64);

        if val.is_empty() {
            continue;
        }
        let vloss = mean_loss(net, &val, config.batch_size)?;
        report.validation_losses.push(vloss);
        log::debug!("epoch {epoch}: train {:.5} val {vloss:.5}", total / data.len() as f64);
        if best.as_ref().is_none_or(|(b, _)| vloss < *b) {
            best = Some((vloss, net.clone()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                report.stopped_early = true;
                break;
            }
        }
    }
    if config.patience.is_some() {
        if let Some((_, best_net)) = best {
            *net = best_net;
        }
    }
    Ok(report)
}

/// Fraction of pairs whose argmax class equals the label (ties go to class 1).
pub fn classification_accuracy<F>(net: &DenseNet, pairs: &[PairExample], featurize: F) -> Result<f64>
where
    F: Fn(&PairExample) -> Result<Vec<f64>> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs".into()));
    }
    let correct = par::try_map(pairs, |p| {
        let x = featurize(p)?;
        let prob = net.forward_entries(&nonzero_entries(&x))?[1];
        Ok::<_, Error>(u8::from(prob >= 0.5) == p.label)
    })
    .map_err(|(i, e)| Error::at(i, e))?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Stage;

    /// Straight-line dense forward pass, independent of the traced path.
    fn reference_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in net.layers() {
            let mut z = l.biases.clone();
            for i in 0..l.out_dim {
                for j in 0..l.in_dim {
                    z[i] += l.weights[i * l.in_dim + j] * a[j];
                }
            }
            a = match l.activation {
                Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                Activation::Relu => z.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect(),
                Activation::Softmax => {
                    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                }
            };
        }
        a
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = DenseNet::zeros(4, &[(3, Activation::Tanh), (2, Activation::Softmax)]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn identity_layer_zero_logits() {
        let layer = Layer {
            in_dim: 2,
            out_dim: 2,
            activation: Activation::Softmax,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            biases: vec![0.0, 0.0],
        };
        let net = DenseNet::from_layers(vec![layer], 0).unwrap();
        assert_eq!(net.forward(&[0.0, 0.0]).unwrap(), [0.5, 0.5]);
        assert_eq!(net.forward(&[3.0, 3.0]).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn forward_matches_reference() {
        let net = DenseNet::new(
            7,
            &[(5, Activation::Tanh), (4, Activation::Relu), (2, Activation::Softmax)],
            11,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 7);
            let got = net.forward(&x).unwrap();
            let want = reference_forward(&net, &x);
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
            assert!((got[0] + got[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_errors() {
        let net = DenseNet::new(3, &[(2, Activation::Softmax)], 1).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(net.forward(&[1.0, f64::NAN, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn invalid_architectures() {
        assert!(DenseNet::new(3, &[(3, Activation::Softmax)], 1).is_err());
        assert!(DenseNet::new(3, &[(2, Activation::Tanh)], 1).is_err());
        assert!(DenseNet::new(3, &[(4, Activation::Softmax), (2, Activation::Softmax)], 1).is_err());
        assert!(DenseNet::new(3, &[], 1).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let net = DenseNet::new(30, &[(10, Activation::Tanh), (2, Activation::Softmax)], 3).unwrap();
        for l in net.layers() {
            let limit = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= limit));
            assert!(l.biases.iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn loss_closed_forms() {
        let zero = DenseNet::zeros(2, &[(2, Activation::Softmax)]).unwrap();
        let (loss, _) = zero.loss_and_grad(&[(&[1.0, 2.0][..], 1)]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let layer = Layer {
            in_dim: 1,
            out_dim: 2,
            activation: Activation::Softmax,
            weights: vec![-1000.0, 1000.0],
            biases: vec![0.0, 0.0],
        };
        let sure = DenseNet::from_layers(vec![layer], 0).unwrap();
        let (loss, _) = sure.loss_and_grad(&[(&[1.0][..], 1)]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(zero.loss_and_grad(&[(&[1.0, 2.0][..], 2)]).is_err());
        assert!(zero.loss_and_grad(&[]).is_err());
    }

    fn finite_difference_check(shape: &[(usize, Activation)], input_dim: usize, seed: u64) {
        let mut net = DenseNet::new(input_dim, shape, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        // Zero biases can put a relu exactly on its kink; check at a generic point.
        for t in net.parameters_mut().into_iter().skip(1).step_by(2) {
            t.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let inputs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, input_dim)).collect();
        let batch: Vec<(&[f64], usize)> = inputs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 2)).collect();
        let (_, grads) = net.loss_and_grad(&batch).unwrap();
        let analytic: Vec<Vec<f64>> = grads.as_slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-5;
        for (t, g) in analytic.iter().enumerate() {
            for i in 0..g.len() {
                let orig = net.parameters_mut()[t][i];
                net.parameters_mut()[t][i] = orig + h;
                let (lp, _) = net.loss_and_grad(&batch).unwrap();
                net.parameters_mut()[t][i] = orig - h;
                let (lm, _) = net.loss_and_grad(&batch).unwrap();
                net.parameters_mut()[t][i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-4, "tensor {t} index {i}: analytic {} numeric {numeric}", g[i]);
            }
        }
    }

    #[test]
    fn gradient_check_each_layer_type() {
        for seed in 0..10 {
            finite_difference_check(&[(4, Activation::Tanh), (2, Activation::Softmax)], 5, seed);
            finite_difference_check(&[(4, Activation::Relu), (3, Activation::Relu), (2, Activation::Softmax)], 5, seed);
            finite_difference_check(&[(2, Activation::Softmax)], 3, seed);
        }
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut adam = AdamState::new(&[1], 0.001);
        let mut p = [0.0];
        adam.step(&mut [&mut p[..]], &[&[1.0][..]]).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_and_errors() {
        let mut adam = AdamState::new(&[3], 0.01);
        let mut p = [1.0, 2.0, 3.0];
        adam.step(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0][..]]).unwrap();
        assert_eq!(p, [1.0, 2.0, 3.0]);
        assert_eq!(adam.steps(), 1);
        let before = adam.clone();
        assert!(adam.step(&mut [&mut p[..]], &[&[0.0, f64::INFINITY, 0.0][..]]).is_err());
        assert_eq!(adam, before);
        assert!(adam.step(&mut [&mut p[..]], &[&[0.0][..]]).is_err());
    }

    fn separable_pairs(n: usize, seed: u64) -> Vec<PairExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                let noise: f64 = rng.random_range(-1.0..1.0);
                PairExample {
                    claim_text: format!("{v} {noise}"),
                    explanation_text: String::new(),
                    label: u8::from(v > 0.0),
                    stage: Stage::A,
                }
            })
            .collect()
    }

    fn parse_features(p: &PairExample) -> Result<Vec<f64>> {
        Ok(p.claim_text.split(' ').map(|t| t.parse().unwrap()).collect())
    }

    #[test]
    fn trains_on_separable_data() {
        let pairs = separable_pairs(200, 1);
        let mut net = DenseNet::new(2, &[(8, Activation::Tanh), (2, Activation::Softmax)], 2).unwrap();
        let config = TrainConfig {
            lr: 0.01,
            patience: None,
            ..TrainConfig::default()
        };
        let report = train(&mut net, &pairs, &[], parse_features, &config).unwrap();
        assert_eq!(report.epoch_losses.len(), 20);
        assert_eq!(report.steps, 20 * 7);
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
        let acc = classification_accuracy(&net, &pairs, parse_features).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn zero_epochs_leave_net_unchanged() {
        let pairs = separable_pairs(10, 1);
        let mut net = DenseNet::new(2, &[(2, Activation::Softmax)], 2).unwrap();
        let before = net.clone();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut net, &pairs, &[], parse_features, &config).unwrap();
        assert_eq!(net, before);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn large_batch_is_one_step_per_epoch() {
        let pairs = separable_pairs(10, 1);
        let mut net = DenseNet::new(2, &[(2, Activation::Softmax)], 2).unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 64,
            ..TrainConfig::default()
        };
        assert_eq!(train(&mut net, &pairs, &[], parse_features, &config).unwrap().steps, 3);
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = separable_pairs(50, 3);
        let config = TrainConfig {
            epochs: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = DenseNet::new(2, &[(6, Activation::Relu), (2, Activation::Softmax)], 4).unwrap();
            train(&mut net, &pairs, &[], parse_features, &config).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stopping_restores_best() {
        let pairs = separable_pairs(40, 3);
        let val = separable_pairs(20, 4);
        let mut net = DenseNet::new(2, &[(2, Activation::Softmax)], 4).unwrap();
        let config = TrainConfig {
            epochs: 50,
            lr: 0.5,
            patience: Some(1),
            ..TrainConfig::default()
        };
        let report = train(&mut net, &pairs, &val, parse_features, &config).unwrap();
        assert!(report.validation_losses.len() <= 50);
        let best = report.best_epoch.unwrap();
        let min = report.validation_losses.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(report.validation_losses[best], min);
    }

    #[test]
    fn featurization_failure_has_context() {
        let pairs = separable_pairs(5, 1);
        let mut net = DenseNet::new(2, &[(2, Activation::Softmax)], 2).unwrap();
        let err = train(
            &mut net,
            &pairs,
            &[],
            |_| Err(Error::InvalidArgument("boom".into())),
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::AtIndex { index: 0, .. }));
    }

    #[test]
    fn checkpoint_round_trip_and_layout() {
        let net = DenseNet::new(3, &[(2, Activation::Tanh), (2, Activation::Softmax)], 8).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FCNN");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 2);
        let header = 10 + 2 * 9;
        assert_eq!(buf.len(), header + 8 * net.parameter_count());
        let first_weight = f64::from_le_bytes(buf[header..header + 8].try_into().unwrap());
        assert_eq!(first_weight, net.layers()[0].weights[0]);

        let back = DenseNet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.layers(), net.layers());

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(DenseNet::read_checkpoint(corrupt.as_slice()).is_err());
        assert!(DenseNet::read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}
