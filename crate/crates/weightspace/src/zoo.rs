//! Populations of small base models trained on synthetic tasks.
//!
//! A zoo is a set of models sharing one architecture and task, trained from
//! different seeds, with checkpoints saved at sparse snapshot epochs. The
//! manifest records per-checkpoint accuracies and the train/val/test split
//! (assigned per model id, so all epochs of a model stay together).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::graph::{ConvDims, Graph, Var};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Mix a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Input features (dense), input channels (conv), channel count (BN).
    pub in_dim: usize,
    /// Output features/channels; equals `in_dim` for BN.
    pub out_dim: usize,
    /// Square kernel extent; 0 for non-conv layers.
    pub kernel: usize,
    pub has_bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputShape {
    Flat(usize),
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl InputShape {
    pub fn features(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Fully-connected ReLU net; `dims` lists feature extents including
    /// input and output, e.g. `[2, 16, 16, 4]`.
    pub fn mlp(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| LayerSpec {
                kind: LayerKind::Dense,
                in_dim: w[0],
                out_dim: w[1],
                kernel: 0,
                has_bias: true,
            })
            .collect();
        Self {
            input: InputShape::Flat(dims[0]),
            layers,
        }
    }

    /// Small convnet: each conv (valid padding, stride 1) is followed by
    /// batch norm, ending in a dense classification head.
    pub fn conv_bn_net(
        height: usize,
        width: usize,
        in_channels: usize,
        conv_channels: &[usize],
        kernel: usize,
        classes: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let (mut h, mut w, mut c) = (height, width, in_channels);
        for &oc in conv_channels {
            layers.push(LayerSpec {
                kind: LayerKind::Conv2d,
                in_dim: c,
                out_dim: oc,
                kernel,
                has_bias: true,
            });
            layers.push(LayerSpec {
                kind: LayerKind::BatchNorm,
                in_dim: oc,
                out_dim: oc,
                kernel: 0,
                has_bias: true,
            });
            h -= kernel - 1;
            w -= kernel - 1;
            c = oc;
        }
        layers.push(LayerSpec {
            kind: LayerKind::Dense,
            in_dim: h * w * c,
            out_dim: classes,
            kernel: 0,
            has_bias: true,
        });
        Self {
            input: InputShape::Image {
                height,
                width,
                channels: in_channels,
            },
            layers,
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::BatchNorm)
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Check dimension compatibility of consecutive layers.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        let (mut h, mut w, mut c) = match self.input {
            InputShape::Flat(d) => (1, 1, d),
            InputShape::Image {
                height,
                width,
                channels,
            } => (height, width, channels),
        };
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Dense => {
                    if l.in_dim != h * w * c {
                        return Err(Error::Config(format!(
                            "layer {i}: dense expects {} inputs, upstream provides {}",
                            l.in_dim,
                            h * w * c
                        )));
                    }
                    h = 1;
                    w = 1;
                    c = l.out_dim;
                }
                LayerKind::Conv2d => {
                    if l.in_dim != c {
                        return Err(Error::Config(format!(
                            "layer {i}: conv expects {} channels, upstream provides {c}",
                            l.in_dim
                        )));
                    }
                    if l.kernel == 0 || l.kernel > h || l.kernel > w {
                        return Err(Error::Config(format!(
                            "layer {i}: kernel {} incompatible with {h}x{w} input",
                            l.kernel
                        )));
                    }
                    h -= l.kernel - 1;
                    w -= l.kernel - 1;
                    c = l.out_dim;
                }
                LayerKind::BatchNorm => {
                    if l.in_dim != c || l.out_dim != c {
                        return Err(Error::Config(format!(
                            "layer {i}: batchnorm extent {} does not match upstream channels {c}",
                            l.in_dim
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors<T> {
    /// Dense: `[out, in]`; conv: `[c_out, c_in*k*k]` flattened in
    /// (channel, ky, kx) order; batch norm: gain stored as `[1, c]`.
    pub weight: Tensor<T>,
    /// Dense/conv bias and BN shift, stored `[1, out]`.
    pub bias: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint<T> {
    pub arch: Architecture,
    pub layers: Vec<LayerTensors<T>>,
    /// Parallel to `layers`; `Some` exactly for batch-norm layers. Running
    /// statistics are inference buffers, not learned parameters, and are
    /// excluded from tokenization.
    pub buffers: Vec<Option<BnBuffers<T>>>,
    pub meta: CheckpointMeta,
}

impl<T: Scalar> ModelCheckpoint<T> {
    /// Seeded initialization: He-scaled weights for dense/conv, unit gain
    /// and zero shift for batch norm.
    pub fn init<R: Rng>(arch: &Architecture, meta: CheckpointMeta, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut buffers = Vec::new();
        for l in &arch.layers {
            match l.kind {
                LayerKind::Dense => {
                    let std = T::from_f64((2.0 / l.in_dim as f64).sqrt());
                    layers.push(LayerTensors {
                        weight: Tensor::randn(&[l.out_dim, l.in_dim], std, rng),
                        bias: l.has_bias.then(|| Tensor::zeros(&[1, l.out_dim])),
                    });
                    buffers.push(None);
                }
                LayerKind::Conv2d => {
                    let fan_in = l.in_dim * l.kernel * l.kernel;
                    let std = T::from_f64((2.0 / fan_in as f64).sqrt());
                    layers.push(LayerTensors {
                        weight: Tensor::randn(&[l.out_dim, fan_in], std, rng),
                        bias: l.has_bias.then(|| Tensor::zeros(&[1, l.out_dim])),
                    });
                    buffers.push(None);
                }
                LayerKind::BatchNorm => {
                    layers.push(LayerTensors {
                        weight: Tensor::ones(&[1, l.out_dim]),
                        bias: Some(Tensor::zeros(&[1, l.out_dim])),
                    });
                    buffers.push(Some(BnBuffers {
                        running_mean: Tensor::zeros(&[l.out_dim]),
                        running_var: Tensor::ones(&[l.out_dim]),
                    }));
                }
            }
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
            buffers,
            meta,
        })
    }

    /// Learned parameter count (weights + biases; BN buffers excluded).
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.all_finite() && l.bias.as_ref().map_or(true, Tensor::all_finite)
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelCheckpoint<U> {
        ModelCheckpoint {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTensors {
                    weight: l.weight.cast(),
                    bias: l.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| {
                    b.as_ref().map(|b| BnBuffers {
                        running_mean: b.running_mean.cast(),
                        running_var: b.running_var.cast(),
                    })
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Graph handles of one model's parameters.
pub struct ModelVars {
    pub layers: Vec<(Var, Option<Var>)>,
}

impl ModelVars {
    /// Flat parameter handles in the same order as
    /// [`collect_params`](collect_params).
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(*w);
            if let Some(b) = b {
                out.push(*b);
            }
        }
        out
    }
}

/// Insert every learned parameter of `m` into the graph.
pub fn leaf_model<T: Scalar>(
    g: &mut Graph<T>,
    m: &ModelCheckpoint<T>,
    requires_grad: bool,
) -> ModelVars {
    let layers = m
        .layers
        .iter()
        .map(|l| {
            (
                g.leaf(l.weight.clone(), requires_grad),
                l.bias.as_ref().map(|b| g.leaf(b.clone(), requires_grad)),
            )
        })
        .collect();
    ModelVars { layers }
}

/// Mutable references to the learned parameters, in graph insertion order.
pub fn collect_params<T: Scalar>(m: &mut ModelCheckpoint<T>) -> Vec<&mut Tensor<T>> {
    let mut out = Vec::new();
    for l in &mut m.layers {
        out.push(&mut l.weight);
        if let Some(b) = &mut l.bias {
            out.push(b);
        }
    }
    out
}

/// Per-batch-norm-layer batch statistics from a training-mode forward pass.
pub struct BnBatchStats<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Forward pass producing logits `[batch, classes]`.
///
/// ReLU follows every layer except the last and layers whose output feeds a
/// batch-norm (the activation comes after normalization). In training mode
/// batch norm uses batch statistics (returned so the caller can update the
/// running buffers); in inference mode it uses the checkpoint's buffers.
pub fn forward_model<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    model: &ModelCheckpoint<T>,
    input: Var,
    training: bool,
) -> Result<(Var, Vec<BnBatchStats<T>>)> {
    let (batch, in_features) = g.value(input).dims2()?;
    if in_features != model.arch.input.features() {
        return Err(Error::Dimension(format!(
            "input has {in_features} features, architecture expects {}",
            model.arch.input.features()
        )));
    }
    let (mut h, mut w, mut c) = match model.arch.input {
        InputShape::Flat(d) => (1, 1, d),
        InputShape::Image {
            height,
            width,
            channels,
        } => (height, width, channels),
    };
    let mut x = input;
    let mut bn_stats = Vec::new();
    let n_layers = model.arch.layers.len();
    for (i, spec) in model.arch.layers.iter().enumerate() {
        let (wv, bv) = vars.layers[i];
        match spec.kind {
            LayerKind::Dense => {
                if h * w > 1 {
                    x = g.reshape(x, &[batch, h * w * c])?;
                    h = 1;
                    w = 1;
                }
                let wt = g.transpose(wv)?;
                x = g.matmul(x, wt)?;
                if let Some(bv) = bv {
                    x = g.add(x, bv)?;
                }
                c = spec.out_dim;
            }
            LayerKind::Conv2d => {
                let dims = ConvDims {
                    batch,
                    height: h,
                    width: w,
                    channels: c,
                    kernel: spec.kernel,
                    stride: 1,
                };
                let cols = g.im2col(x, dims)?;
                let wt = g.transpose(wv)?;
                x = g.matmul(cols, wt)?;
                if let Some(bv) = bv {
                    x = g.add(x, bv)?;
                }
                h = dims.out_height();
                w = dims.out_width();
                c = spec.out_dim;
                // rows of x are (batch, y, x) with channel columns: NHWC order
                x = g.reshape(x, &[batch, h * w * c])?;
            }
            LayerKind::BatchNorm => {
                let rows = g.reshape(x, &[batch * h * w, c])?;
                let bv = bv.expect("batch norm always has a shift parameter");
                let normed = if training {
                    let (y, mean, var) =
                        g.batch_norm(rows, wv, bv, T::from_f64(BN_EPS))?;
                    bn_stats.push(BnBatchStats {
                        layer: i,
                        mean,
                        var,
                    });
                    y
                } else {
                    let buf = model.buffers[i]
                        .as_ref()
                        .expect("batch norm layer missing running buffers");
                    let eps = T::from_f64(BN_EPS);
                    let mean = Tensor::new(vec![1, c], buf.running_mean.data().to_vec())?;
                    let inv_std = Tensor::new(
                        vec![1, c],
                        buf.running_var
                            .data()
                            .iter()
                            .map(|&v| T::one() / (v + eps).sqrt())
                            .collect(),
                    )?;
                    let mv = g.constant(mean);
                    let sv = g.constant(inv_std);
                    let centered = g.sub(rows, mv)?;
                    let xhat = g.mul(centered, sv)?;
                    let scaled = g.mul(xhat, wv)?;
                    g.add(scaled, bv)?
                };
                x = g.reshape(normed, &[batch, h * w * c])?;
            }
        }
        let next_is_bn = model
            .arch
            .layers
            .get(i + 1)
            .is_some_and(|l| l.kind == LayerKind::BatchNorm);
        if i + 1 < n_layers && !next_is_bn {
            x = g.relu(x);
        }
    }
    Ok((x, bn_stats))
}

/// Blend batch statistics into the checkpoint's running buffers.
pub fn update_bn_buffers<T: Scalar>(model: &mut ModelCheckpoint<T>, stats: &[BnBatchStats<T>]) {
    let momentum = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - momentum;
    for s in stats {
        let buf = model.buffers[s.layer]
            .as_mut()
            .expect("stats refer to a non-BN layer");
        for (r, &b) in buf.running_mean.data_mut().iter_mut().zip(&s.mean) {
            *r = *r * keep + b * momentum;
        }
        for (r, &b) in buf.running_var.data_mut().iter_mut().zip(&s.var) {
            *r = *r * keep + b * momentum;
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// One of `gaussian-blobs`, `two-rings`, `proc-digits`.
    pub generator: String,
    pub classes: usize,
    pub input: InputShape,
    pub noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn task_id(&self) -> String {
        format!("{}-c{}-s{}", self.generator, self.classes, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Deterministic synthetic dataset. Labels are assigned round-robin, so
/// class counts differ by at most one.
pub fn generate_task<T: Scalar>(spec: &TaskSpec, n: usize) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be positive".into()));
    }
    if spec.classes < 2 {
        return Err(Error::Config("task needs at least 2 classes".into()));
    }
    let d = spec.input.features();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let noise = T::from_f64(spec.noise);
    let mut inputs = Tensor::zeros(&[n, d]);
    match spec.generator.as_str() {
        "gaussian-blobs" => {
            // class means evenly spaced on a radius-2 circle in the first
            // two input dimensions
            let means: Vec<(T, T)> = (0..spec.classes)
                .map(|c| {
                    let theta = 2.0 * std::f64::consts::PI * c as f64 / spec.classes as f64;
                    (
                        T::from_f64(2.0 * theta.cos()),
                        T::from_f64(2.0 * theta.sin()),
                    )
                })
                .collect();
            if d < 2 {
                return Err(Error::Config("gaussian-blobs needs input dim >= 2".into()));
            }
            for (i, &label) in labels.iter().enumerate() {
                let row = inputs.row_mut(i);
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = noise * T::from_f64(z);
                }
                row[0] = row[0] + means[label].0;
                row[1] = row[1] + means[label].1;
            }
        }
        "two-rings" => {
            // class c lives on a radius-(1+c) ring in the first two input
            // dimensions; remaining dimensions are pure noise
            if d < 2 {
                return Err(Error::Config("two-rings needs input dim >= 2".into()));
            }
            for (i, &label) in labels.iter().enumerate() {
                let phi: f64 = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                let r = 1.0 + label as f64;
                let row = inputs.row_mut(i);
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = noise * T::from_f64(z);
                }
                row[0] = row[0] + T::from_f64(r * phi.cos());
                row[1] = row[1] + T::from_f64(r * phi.sin());
            }
        }
        "proc-digits" => {
            // per-class prototype images plus pixel noise; prototypes are
            // fixed by (classes, dims) like the other generators' class
            // structure, so `seed` only varies the sample draw, and fresh
            // draws with a different seed stay on the same task
            let mut proto_rng = ChaCha8Rng::seed_from_u64(0xD161);
            let protos: Vec<Vec<T>> = (0..spec.classes)
                .map(|_| {
                    (0..d)
                        .map(|_| T::from_f64(proto_rng.gen::<f64>()))
                        .collect()
                })
                .collect();
            for (i, &label) in labels.iter().enumerate() {
                let row = inputs.row_mut(i);
                for (v, &p) in row.iter_mut().zip(&protos[label]) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = p + noise * T::from_f64(z);
                }
            }
        }
        other => {
            return Err(Error::Config(format!("unknown task generator '{other}'")));
        }
    }
    Ok(Dataset { inputs, labels })
}

// ---------------------------------------------------------------------------
// Evaluation and training
// ---------------------------------------------------------------------------

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let (r, c) = logits.dims2().expect("logits must be 2-D");
    (0..r)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Inference-mode accuracy and mean cross-entropy loss.
pub fn evaluate<T: Scalar>(model: &ModelCheckpoint<T>, data: &Dataset<T>) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let vars = leaf_model(&mut g, model, false);
    let input = g.constant(data.inputs.clone());
    let (logits, _) = forward_model(&mut g, &vars, model, input, false)?;
    let loss = g.cross_entropy_logits(logits, &data.labels)?;
    let preds = argmax_rows(g.value(logits));
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok((
        correct as f64 / data.labels.len() as f64,
        g.value(loss).item().as_f64(),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub snapshot_epochs: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 25,
            snapshot_epochs: vec![1, 5, 10, 25],
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

/// One AdamW epoch over shuffled minibatches. Returns the mean batch loss;
/// a non-finite value means training diverged.
pub fn train_epoch<T: Scalar>(
    model: &mut ModelCheckpoint<T>,
    data: &Dataset<T>,
    opt: &mut AdamW<T>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let d = data.inputs.shape()[1];
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 && model.arch.has_batchnorm() {
            continue; // batch statistics undefined on singleton batches
        }
        let mut xb = Tensor::zeros(&[chunk.len(), d]);
        let mut yb = Vec::with_capacity(chunk.len());
        for (bi, &si) in chunk.iter().enumerate() {
            xb.row_mut(bi).copy_from_slice(data.inputs.row(si));
            yb.push(data.labels[si]);
        }
        let mut g = Graph::new();
        let vars = leaf_model(&mut g, model, true);
        let input = g.constant(xb);
        let (logits, bn_stats) = forward_model(&mut g, &vars, model, input, true)?;
        let loss = g.cross_entropy_logits(logits, &yb)?;
        let loss_val = g.value(loss).item().as_f64();
        total += loss_val;
        batches += 1;
        if !loss_val.is_finite() {
            return Ok(f64::NAN);
        }
        let grads = g.backward(loss)?;
        let flat = vars.flat();
        let grad_refs: Vec<&Tensor<T>> = flat
            .iter()
            .map(|v| {
                grads[v.index()]
                    .as_ref()
                    .expect("every parameter receives a gradient")
            })
            .collect();
        {
            let mut params = collect_params(model);
            opt.step(&mut params, &grad_refs)?;
        }
        update_bn_buffers(model, &bn_stats);
    }
    Ok(total / batches.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooEntry {
    pub model_id: String,
    pub epoch: usize,
    pub task_id: String,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Generalization gap, train_acc − test_acc.
    pub ggap: f64,
    pub split: Split,
    /// Set when base training diverged; excluded checkpoints are not saved.
    pub excluded: bool,
}

/// Hidden-unit permutations aligning each model to a reference, recorded so
/// alignment is reproducible and re-applicable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub reference_model: String,
    /// Per model id: one permutation per hidden boundary.
    pub permutations: BTreeMap<String, Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooManifest {
    pub task: TaskSpec,
    pub arch: Architecture,
    pub seed: u64,
    pub split_ratios: (f64, f64, f64),
    pub entries: Vec<ZooEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentRecord>,
}

#[derive(Debug, Clone)]
pub struct Zoo<T> {
    pub manifest: ZooManifest,
    pub checkpoints: Vec<ModelCheckpoint<T>>,
}

impl<T: Scalar> Zoo<T> {
    pub fn checkpoint(&self, model_id: &str, epoch: usize) -> Option<&ModelCheckpoint<T>> {
        self.checkpoints
            .iter()
            .find(|c| c.meta.model_id == model_id && c.meta.epoch == epoch)
    }

    /// Model ids belonging to a split, sorted, excluding diverged models.
    pub fn split_ids(&self, split: Split) -> Vec<String> {
        let mut ids: Vec<String> = self
            .manifest
            .entries
            .iter()
            .filter(|e| e.split == split && !e.excluded)
            .map(|e| e.model_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn snapshot_epochs(&self) -> Vec<usize> {
        let mut epochs: Vec<usize> = self.manifest.entries.iter().map(|e| e.epoch).collect();
        epochs.sort();
        epochs.dedup();
        epochs
    }
}

/// Assign 70:15:15 splits over shuffled model ids (all epochs of a model
/// share its split).
fn assign_splits(n_models: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_models).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5B17));
    order.shuffle(&mut rng);
    let n_train = (0.7 * n_models as f64).round() as usize;
    let n_val = (0.15 * n_models as f64).round() as usize;
    let mut splits = vec![Split::Test; n_models];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Train a population of models and snapshot each at the given epochs.
///
/// The task's train set uses the task seed, the held-out set an offset
/// seed. Models train in parallel; results are merged in model-id order.
pub fn train_zoo<T: Scalar>(
    arch: &Architecture,
    task: &TaskSpec,
    n_models: usize,
    n_train: usize,
    n_test: usize,
    settings: &TrainSettings,
    seed: u64,
) -> Result<Zoo<T>> {
    if n_models < 10 {
        return Err(Error::Argument(
            "zoo needs at least 10 models for the probe experiments".into(),
        ));
    }
    arch.validate()?;
    if settings.snapshot_epochs.iter().any(|&e| e == 0 || e > settings.epochs) {
        return Err(Error::Config(
            "snapshot epochs must lie in [1, epochs]".into(),
        ));
    }
    let train_data: Dataset<T> = generate_task(task, n_train)?;
    let test_spec = TaskSpec {
        seed: derive_seed(task.seed, 0x7E57),
        ..task.clone()
    };
    let test_data: Dataset<T> = generate_task(&test_spec, n_test)?;

    let results: Vec<Result<(Vec<ZooEntry>, Vec<ModelCheckpoint<T>>)>> = (0..n_models)
        .into_par_iter()
        .map(|mi| {
            let model_seed = derive_seed(seed, mi as u64 + 1);
            let model_id = format!("m{mi:03}");
            let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
            let mut model = ModelCheckpoint::init(
                arch,
                CheckpointMeta {
                    model_id: model_id.clone(),
                    seed: model_seed,
                    epoch: 0,
                },
                &mut rng,
            )?;
            let mut opt = AdamW::new(
                T::from_f64(settings.lr),
                (T::from_f64(0.9), T::from_f64(0.999)),
                T::from_f64(1e-8),
                T::from_f64(settings.weight_decay),
            );
            let mut entries = Vec::new();
            let mut snaps = Vec::new();
            let mut diverged = false;
            for epoch in 1..=settings.epochs {
                if !diverged {
                    let loss =
                        train_epoch(&mut model, &train_data, &mut opt, settings.batch_size, &mut rng)?;
                    if !loss.is_finite() || !model.all_finite() {
                        diverged = true;
                    }
                }
                if settings.snapshot_epochs.contains(&epoch) {
                    if diverged {
                        entries.push(ZooEntry {
                            model_id: model_id.clone(),
                            epoch,
                            task_id: task.task_id(),
                            seed: model_seed,
                            train_acc: f64::NAN,
                            test_acc: f64::NAN,
                            ggap: f64::NAN,
                            split: Split::Train, // reassigned below
                            excluded: true,
                        });
                        continue;
                    }
                    let (train_acc, _) = evaluate(&model, &train_data)?;
                    let (test_acc, _) = evaluate(&model, &test_data)?;
                    let mut snap = model.clone();
                    snap.meta.epoch = epoch;
                    snaps.push(snap);
                    entries.push(ZooEntry {
                        model_id: model_id.clone(),
                        epoch,
                        task_id: task.task_id(),
                        seed: model_seed,
                        train_acc,
                        test_acc,
                        ggap: train_acc - test_acc,
                        split: Split::Train, // reassigned below
                        excluded: false,
                    });
                }
            }
            Ok((entries, snaps))
        })
        .collect();

    let splits = assign_splits(n_models, seed);
    let mut entries = Vec::new();
    let mut checkpoints = Vec::new();
    for (mi, res) in results.into_iter().enumerate() {
        let (mut es, cs) = res?;
        for e in &mut es {
            e.split = splits[mi];
        }
        entries.extend(es);
        checkpoints.extend(cs);
    }
    Ok(Zoo {
        manifest: ZooManifest {
            task: task.clone(),
            arch: arch.clone(),
            seed,
            split_ratios: (0.7, 0.15, 0.15),
            entries,
            alignment: None,
        },
        checkpoints,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

fn checkpoint_tensor_table<T: Scalar>(m: &ModelCheckpoint<T>) -> Vec<(String, &Tensor<T>)> {
    let mut table = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        table.push((format!("layer{i}.weight"), &l.weight));
        if let Some(b) = &l.bias {
            table.push((format!("layer{i}.bias"), b));
        }
        if let Some(buf) = &m.buffers[i] {
            table.push((format!("layer{i}.running_mean"), &buf.running_mean));
            table.push((format!("layer{i}.running_var"), &buf.running_var));
        }
    }
    table
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, m: &ModelCheckpoint<T>) -> Result<()> {
    let meta = serde_json::json!({
        "arch": m.arch,
        "meta": m.meta,
    });
    write_container(dir, meta, &checkpoint_tensor_table(m))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<ModelCheckpoint<T>> {
    let (meta, tensors) = read_container::<T>(dir)?;
    let arch: Architecture = serde_json::from_value(
        meta.get("arch")
            .ok_or_else(|| Error::Format("checkpoint manifest missing arch".into()))?
            .clone(),
    )?;
    let ckpt_meta: CheckpointMeta = serde_json::from_value(
        meta.get("meta")
            .ok_or_else(|| Error::Format("checkpoint manifest missing meta".into()))?
            .clone(),
    )?;
    let by_name: BTreeMap<String, Tensor<T>> = tensors.into_iter().collect();
    let fetch = |name: &str| -> Result<Tensor<T>> {
        by_name
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))
    };
    let mut layers = Vec::new();
    let mut buffers = Vec::new();
    for (i, spec) in arch.layers.iter().enumerate() {
        layers.push(LayerTensors {
            weight: fetch(&format!("layer{i}.weight"))?,
            bias: if spec.has_bias || spec.kind == LayerKind::BatchNorm {
                Some(fetch(&format!("layer{i}.bias"))?)
            } else {
                None
            },
        });
        buffers.push(if spec.kind == LayerKind::BatchNorm {
            Some(BnBuffers {
                running_mean: fetch(&format!("layer{i}.running_mean"))?,
                running_var: fetch(&format!("layer{i}.running_var"))?,
            })
        } else {
            None
        });
    }
    Ok(ModelCheckpoint {
        arch,
        layers,
        buffers,
        meta: ckpt_meta,
    })
}

pub const ZOO_MANIFEST_FILE: &str = "zoo.json";

pub fn save_zoo<T: Scalar>(dir: &Path, zoo: &Zoo<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(ZOO_MANIFEST_FILE),
        serde_json::to_string_pretty(&zoo.manifest)?,
    )?;
    for c in &zoo.checkpoints {
        save_checkpoint(&dir.join(format!("{}_ep{}", c.meta.model_id, c.meta.epoch)), c)?;
    }
    Ok(())
}

pub fn load_zoo<T: Scalar>(dir: &Path) -> Result<Zoo<T>> {
    let manifest_path = dir.join(ZOO_MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Format(format!(
            "missing zoo manifest at {}",
            manifest_path.display()
        )));
    }
    let manifest: ZooManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let mut checkpoints = Vec::new();
    for e in &manifest.entries {
        if e.excluded {
            continue;
        }
        checkpoints.push(load_checkpoint(
            &dir.join(format!("{}_ep{}", e.model_id, e.epoch)),
        )?);
    }
    Ok(Zoo {
        manifest,
        checkpoints,
    })
}
