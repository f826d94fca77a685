//! Checkpoint ↔ token-sequence conversion.
//!
//! Each layer is viewed as a 2-D matrix with one row per output channel:
//! dense and conv weights keep their stored row-major layout (conv rows are
//! flattened in (channel, ky, kx) order) and the bias joins as a final
//! column; batch-norm layers become a gain column plus a shift column. Rows
//! are sliced into `d_t`-wide tokens, zero-padded where a row does not divide
//! evenly, with a mask marking signal vs. padding. Every token carries a
//! 1-based 3-D position [n, l, k]: global index, layer, index within layer.
//! BN running statistics are inference buffers and are not tokenized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::zoo::{
    Architecture, BnBuffers, CheckpointMeta, LayerKind, LayerTensors, ModelCheckpoint,
};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    /// 1-based layer position used in token coordinates.
    pub layer: usize,
    /// Output channels = rows of the layer matrix.
    pub rows: usize,
    /// Row width before padding (weights per channel, plus bias column).
    pub row_width: usize,
    /// Tokens per row, ceil(row_width / d_t).
    pub parts_per_row: usize,
    /// Zero entries appended to the last part of each row.
    pub pad_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    /// `[N, d_t]` token contents.
    pub tokens: Tensor<T>,
    /// `[n, l, k]` per token, all 1-based.
    pub positions: Vec<[usize; 3]>,
    /// `[N, d_t]`, 1 on signal entries, 0 on padding.
    pub mask: Tensor<T>,
    pub layout: Vec<LayerLayout>,
    pub d_t: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A consecutive slice of a token sequence with absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWindow<T> {
    pub tokens: Tensor<T>,
    pub positions: Vec<[usize; 3]>,
    pub mask: Tensor<T>,
}

/// Per-layer standardization constants shared by a whole population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub layer_mean: Vec<f64>,
    pub layer_std: Vec<f64>,
    pub reference_model: String,
    pub d_t: usize,
}

/// View layer `i` of a checkpoint as its 2-D token matrix.
pub fn layer_matrix<T: Scalar>(m: &ModelCheckpoint<T>, i: usize) -> Result<Tensor<T>> {
    let spec = &m.arch.layers[i];
    let lt = &m.layers[i];
    match spec.kind {
        LayerKind::Dense | LayerKind::Conv2d => {
            let (rows, cols) = lt.weight.dims2()?;
            match &lt.bias {
                Some(b) => {
                    let mut out = Tensor::zeros(&[rows, cols + 1]);
                    for r in 0..rows {
                        out.row_mut(r)[..cols].copy_from_slice(lt.weight.row(r));
                        out.set2(r, cols, b.data()[r]);
                    }
                    Ok(out)
                }
                None => Ok(lt.weight.clone()),
            }
        }
        LayerKind::BatchNorm => {
            let c = spec.out_dim;
            let gain = lt.weight.data();
            let bias = lt
                .bias
                .as_ref()
                .ok_or_else(|| Error::Format("batch norm layer missing shift".into()))?
                .data();
            let mut out = Tensor::zeros(&[c, 2]);
            for r in 0..c {
                out.set2(r, 0, gain[r]);
                out.set2(r, 1, bias[r]);
            }
            Ok(out)
        }
    }
}

/// Inverse of [`layer_matrix`]: write a 2-D token matrix back into layer `i`.
pub fn set_layer_matrix<T: Scalar>(
    m: &mut ModelCheckpoint<T>,
    i: usize,
    mat: &Tensor<T>,
) -> Result<()> {
    let spec = m.arch.layers[i].clone();
    let (rows, cols) = mat.dims2()?;
    match spec.kind {
        LayerKind::Dense | LayerKind::Conv2d => {
            let wcols = if spec.has_bias { cols - 1 } else { cols };
            let mut weight = Tensor::zeros(&[rows, wcols]);
            let mut bias = spec.has_bias.then(|| Tensor::zeros(&[1, rows]));
            for r in 0..rows {
                weight.row_mut(r).copy_from_slice(&mat.row(r)[..wcols]);
                if let Some(b) = &mut bias {
                    b.data_mut()[r] = mat.get2(r, wcols);
                }
            }
            m.layers[i] = LayerTensors { weight, bias };
        }
        LayerKind::BatchNorm => {
            if cols != 2 {
                return Err(Error::Format(format!(
                    "batch norm matrix must have 2 columns, got {cols}"
                )));
            }
            let mut gain = Tensor::zeros(&[1, rows]);
            let mut bias = Tensor::zeros(&[1, rows]);
            for r in 0..rows {
                gain.data_mut()[r] = mat.get2(r, 0);
                bias.data_mut()[r] = mat.get2(r, 1);
            }
            m.layers[i] = LayerTensors {
                weight: gain,
                bias: Some(bias),
            };
        }
    }
    Ok(())
}

fn expected_row_width(spec: &crate::zoo::LayerSpec) -> usize {
    match spec.kind {
        LayerKind::Dense => spec.in_dim + usize::from(spec.has_bias),
        LayerKind::Conv2d => spec.in_dim * spec.kernel * spec.kernel + usize::from(spec.has_bias),
        LayerKind::BatchNorm => 2,
    }
}

/// Slice a checkpoint into `d_t`-wide tokens with positions and mask.
pub fn tokenize<T: Scalar>(m: &ModelCheckpoint<T>, d_t: usize) -> Result<TokenSequence<T>> {
    if d_t == 0 {
        return Err(Error::Argument("token width must be positive".into()));
    }
    if m.layers.is_empty() {
        return Err(Error::Argument("cannot tokenize an empty model".into()));
    }
    let mut layout = Vec::with_capacity(m.layers.len());
    let mut total = 0usize;
    for (i, spec) in m.arch.layers.iter().enumerate() {
        let rows = match spec.kind {
            LayerKind::BatchNorm => spec.out_dim,
            _ => spec.out_dim,
        };
        let row_width = expected_row_width(spec);
        let parts = row_width.div_ceil(d_t);
        layout.push(LayerLayout {
            layer: i + 1,
            rows,
            row_width,
            parts_per_row: parts,
            pad_width: parts * d_t - row_width,
        });
        total += rows * parts;
    }
    let mut tokens = Tensor::zeros(&[total, d_t]);
    let mut mask = Tensor::zeros(&[total, d_t]);
    let mut positions = Vec::with_capacity(total);
    let mut n = 0usize;
    for (i, lay) in layout.iter().enumerate() {
        let mat = layer_matrix(m, i)?;
        for r in 0..lay.rows {
            let row = mat.row(r);
            for p in 0..lay.parts_per_row {
                let start = p * d_t;
                let end = (start + d_t).min(lay.row_width);
                let width = end - start;
                tokens.row_mut(n)[..width].copy_from_slice(&row[start..end]);
                for v in &mut mask.row_mut(n)[..width] {
                    *v = T::one();
                }
                positions.push([n + 1, lay.layer, r * lay.parts_per_row + p + 1]);
                n += 1;
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        positions,
        mask,
        layout,
        d_t,
    })
}

/// Rebuild a checkpoint from tokens. Padded entries are ignored; BN running
/// buffers are not part of the token stream and reset to (0, 1).
pub fn detokenize<T: Scalar>(t: &TokenSequence<T>, arch: &Architecture) -> Result<ModelCheckpoint<T>> {
    if t.layout.len() != arch.layers.len() {
        return Err(Error::Format(format!(
            "layout has {} layers, architecture has {}",
            t.layout.len(),
            arch.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut buffers = Vec::with_capacity(arch.layers.len());
    let mut n = 0usize;
    for (i, (spec, lay)) in arch.layers.iter().zip(&t.layout).enumerate() {
        let rows = spec.out_dim;
        let row_width = expected_row_width(spec);
        if lay.rows != rows || lay.row_width != row_width {
            return Err(Error::Format(format!(
                "layer {i}: layout {}x{} does not match architecture {}x{}",
                lay.rows, lay.row_width, rows, row_width
            )));
        }
        let mut mat = Tensor::zeros(&[rows, row_width]);
        for r in 0..rows {
            for p in 0..lay.parts_per_row {
                if n >= t.len() {
                    return Err(Error::Format("token sequence shorter than layout".into()));
                }
                let start = p * t.d_t;
                let end = (start + t.d_t).min(row_width);
                mat.row_mut(r)[start..end].copy_from_slice(&t.tokens.row(n)[..end - start]);
                n += 1;
            }
        }
        // placeholder tensors, overwritten below
        layers.push(LayerTensors {
            weight: Tensor::zeros(&[1, 1]),
            bias: None,
        });
        buffers.push((spec.kind == LayerKind::BatchNorm).then(|| BnBuffers {
            running_mean: Tensor::zeros(&[spec.out_dim]),
            running_var: Tensor::ones(&[spec.out_dim]),
        }));
        let mut tmp = ModelCheckpoint {
            arch: arch.clone(),
            layers,
            buffers,
            meta: CheckpointMeta {
                model_id: "decoded".into(),
                seed: 0,
                epoch: 0,
            },
        };
        set_layer_matrix(&mut tmp, i, &mat)?;
        layers = tmp.layers;
        buffers = tmp.buffers;
    }
    if n != t.len() {
        return Err(Error::Format("token sequence longer than layout".into()));
    }
    Ok(ModelCheckpoint {
        arch: arch.clone(),
        layers,
        buffers,
        meta: CheckpointMeta {
            model_id: "decoded".into(),
            seed: 0,
            epoch: 0,
        },
    })
}

/// Per-layer mean/std over a population of same-architecture checkpoints
/// (bias columns included; BN buffers excluded). Degenerate layers get the
/// std floor.
pub fn compute_preprocess_state<T: Scalar>(
    population: &[&ModelCheckpoint<T>],
    d_t: usize,
) -> Result<PreprocessState> {
    let first = population
        .first()
        .ok_or_else(|| Error::Argument("population is empty".into()))?;
    let n_layers = first.arch.layers.len();
    let mut layer_mean = Vec::with_capacity(n_layers);
    let mut layer_std = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for m in population {
            let mat = layer_matrix(m, i)?;
            for &v in mat.data() {
                let v = v.as_f64();
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(0.0);
        layer_mean.push(mean);
        layer_std.push(var.sqrt().max(STD_FLOOR));
    }
    Ok(PreprocessState {
        layer_mean,
        layer_std,
        reference_model: first.meta.model_id.clone(),
        d_t,
    })
}

fn affine_checkpoint<T: Scalar>(
    m: &ModelCheckpoint<T>,
    state: &PreprocessState,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<ModelCheckpoint<T>> {
    if state.layer_mean.len() != m.arch.layers.len() {
        return Err(Error::Config(format!(
            "preprocess state covers {} layers, model has {}",
            state.layer_mean.len(),
            m.arch.layers.len()
        )));
    }
    let mut out = m.clone();
    for i in 0..m.arch.layers.len() {
        let (mean, std) = (state.layer_mean[i], state.layer_std[i]);
        let mat = layer_matrix(m, i)?.map(|v| T::from_f64(f(v.as_f64(), mean, std)));
        set_layer_matrix(&mut out, i, &mat)?;
    }
    Ok(out)
}

/// Shift/scale each layer to the population's standard coordinates.
pub fn standardize<T: Scalar>(
    m: &ModelCheckpoint<T>,
    state: &PreprocessState,
) -> Result<ModelCheckpoint<T>> {
    affine_checkpoint(m, state, |v, mean, std| (v - mean) / std)
}

/// Inverse of [`standardize`].
pub fn destandardize<T: Scalar>(
    m: &ModelCheckpoint<T>,
    state: &PreprocessState,
) -> Result<ModelCheckpoint<T>> {
    affine_checkpoint(m, state, |v, mean, std| v * std + mean)
}

/// Uniformly sample a consecutive window of (at most) `ws` tokens. Positions
/// stay absolute.
pub fn draw_window<T: Scalar>(
    t: &TokenSequence<T>,
    ws: usize,
    rng: &mut impl Rng,
) -> Result<TokenWindow<T>> {
    if ws == 0 {
        return Err(Error::Argument("window size must be positive".into()));
    }
    let n = t.len();
    let len = ws.min(n);
    let start = if n > len { rng.gen_range(0..=n - len) } else { 0 };
    Ok(slice_window(t, start, len))
}

/// Tokens `[start, start+len)` of the sequence, positions carried verbatim.
pub fn slice_window<T: Scalar>(t: &TokenSequence<T>, start: usize, len: usize) -> TokenWindow<T> {
    let mut tokens = Tensor::zeros(&[len, t.d_t]);
    let mut mask = Tensor::zeros(&[len, t.d_t]);
    for i in 0..len {
        tokens.row_mut(i).copy_from_slice(t.tokens.row(start + i));
        mask.row_mut(i).copy_from_slice(t.mask.row(start + i));
    }
    TokenWindow {
        tokens,
        positions: t.positions[start..start + len].to_vec(),
        mask,
    }
}

/// Windows needed per model per epoch for approximately full coverage.
pub fn windows_per_model(n: usize, ws: usize) -> usize {
    n.div_ceil(ws)
}
