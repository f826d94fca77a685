//! Whole-model embedding by haloed chunking.
//!
//! Models longer than the training window are embedded chunk by chunk:
//! content chunks partition the token sequence exactly, and each chunk is
//! encoded together with up to `h` context tokens on either side whose
//! outputs are discarded. Aggregates (`aggregate_mean`, `layer_spread`,
//! `pairwise_distances`) summarize the stitched sequence for probing and
//! inspection.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::container::write_container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone)]
pub struct EmbeddingSequence<T> {
    pub model_id: String,
    pub epoch: usize,
    /// Per-token latents, N×d_z.
    pub z: Tensor<T>,
    /// 1-based [n, l, k] coordinates, copied from the token sequence.
    pub positions: Vec<[usize; 3]>,
}

impl<T: Scalar> EmbeddingSequence<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Distinct layer indices in sequence order.
    pub fn layers(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for p in &self.positions {
            if out.last() != Some(&p[1]) {
                out.push(p[1]);
            }
        }
        out
    }

    fn layer_rows(&self, layer: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.positions[i][1] == layer)
            .collect()
    }
}

/// Embed one model: encode haloed chunks and stitch the content outputs.
///
/// Content chunks of `ws_inf` tokens partition the sequence; each is encoded
/// with up to `h` extra tokens before and after (clipped at the ends) and
/// only the content rows are kept.
pub fn embed_model<T: Scalar>(
    model: &Autoencoder<T>,
    seq: &TokenSequence<T>,
    model_id: &str,
    epoch: usize,
    ws_inf: usize,
    h: usize,
) -> Result<EmbeddingSequence<T>> {
    if ws_inf == 0 {
        return Err(Error::Argument("chunk size must be at least 1".into()));
    }
    let n = seq.len();
    let d_z = model.config.d_z;
    let chunk_bounds: Vec<(usize, usize)> = (0..n.div_ceil(ws_inf))
        .map(|c| (c * ws_inf, ((c + 1) * ws_inf).min(n)))
        .collect();
    let chunks: Vec<Tensor<T>> = chunk_bounds
        .par_iter()
        .map(|&(start, end)| {
            let lo = start.saturating_sub(h);
            let hi = (end + h).min(n);
            let w = crate::tokenizer::slice_window(seq, lo, hi - lo);
            let z = model.encode_window(&w.tokens, &w.positions)?;
            // drop halo rows
            let mut content = Tensor::zeros(&[end - start, d_z]);
            for i in 0..end - start {
                content
                    .row_mut(i)
                    .copy_from_slice(z.row(start - lo + i));
            }
            Ok(content)
        })
        .collect::<Result<_>>()?;
    let mut z = Tensor::zeros(&[n, d_z]);
    let mut row = 0usize;
    for chunk in &chunks {
        for i in 0..chunk.shape()[0] {
            z.row_mut(row).copy_from_slice(chunk.row(i));
            row += 1;
        }
    }
    Ok(EmbeddingSequence {
        model_id: model_id.to_string(),
        epoch,
        z,
        positions: seq.positions.clone(),
    })
}

/// Mean latent over all tokens.
pub fn aggregate_mean<T: Scalar>(e: &EmbeddingSequence<T>) -> Result<Vec<f64>> {
    if e.is_empty() {
        return Err(Error::Argument("cannot aggregate an empty sequence".into()));
    }
    let (n, d) = e.z.dims2()?;
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(e.z.row(i)) {
            *m += v.as_f64();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    Ok(mean)
}

/// Per-layer token spread: per-dimension population std over the layer's
/// tokens, averaged over dimensions. Keys are 1-based layer indices.
pub fn layer_spread<T: Scalar>(e: &EmbeddingSequence<T>) -> Result<Vec<(usize, f64)>> {
    let (_, d) = e.z.dims2()?;
    let mut out = Vec::new();
    for layer in e.layers() {
        let rows = e.layer_rows(layer);
        let count = rows.len() as f64;
        let mut spread = 0.0;
        for j in 0..d {
            let mean: f64 = rows.iter().map(|&i| e.z.get2(i, j).as_f64()).sum::<f64>() / count;
            let var: f64 = rows
                .iter()
                .map(|&i| {
                    let x = e.z.get2(i, j).as_f64() - mean;
                    x * x
                })
                .sum::<f64>()
                / count;
            spread += var.sqrt();
        }
        out.push((layer, spread / d as f64));
    }
    Ok(out)
}

/// Euclidean distances between all unordered token pairs of one layer.
pub fn pairwise_distances<T: Scalar>(
    e: &EmbeddingSequence<T>,
    layer: usize,
) -> Result<Vec<f64>> {
    let rows = e.layer_rows(layer);
    if rows.len() < 2 {
        return Err(Error::Argument(format!(
            "layer {layer} has {} token(s); need at least 2 for pairwise distances",
            rows.len()
        )));
    }
    let mut out = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let d2: f64 = e
                .z
                .row(i)
                .iter()
                .zip(e.z.row(j))
                .map(|(&x, &y)| {
                    let v = x.as_f64() - y.as_f64();
                    v * v
                })
                .sum();
            out.push(d2.sqrt());
        }
    }
    Ok(out)
}

/// Summary row for the CSV export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub model_id: String,
    pub epoch: usize,
    pub mean: Vec<f64>,
    pub spread: Vec<(usize, f64)>,
}

pub fn summarize<T: Scalar>(e: &EmbeddingSequence<T>) -> Result<EmbeddingSummary> {
    Ok(EmbeddingSummary {
        model_id: e.model_id.clone(),
        epoch: e.epoch,
        mean: aggregate_mean(e)?,
        spread: layer_spread(e)?,
    })
}

/// Persist embeddings as a container; per-token latents are stored under
/// `{model_id}_ep{epoch}.z` with positions in the manifest metadata.
pub fn save_embeddings<T: Scalar>(dir: &Path, seqs: &[EmbeddingSequence<T>]) -> Result<()> {
    let mut tensors = Vec::with_capacity(seqs.len());
    let mut meta_entries = Vec::with_capacity(seqs.len());
    for e in seqs {
        let name = format!("{}_ep{}.z", e.model_id, e.epoch);
        tensors.push((name.clone(), &e.z));
        meta_entries.push(serde_json::json!({
            "name": name,
            "model_id": e.model_id,
            "epoch": e.epoch,
            "positions": e.positions,
        }));
    }
    write_container(dir, serde_json::json!({ "embeddings": meta_entries }), &tensors)
}

/// CSV of per-model aggregates: model id, epoch, mean components, then one
/// spread column per layer.
pub fn write_summary_csv(path: &Path, rows: &[EmbeddingSummary]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.mean.len());
    let layers: Vec<usize> = rows
        .first()
        .map_or(Vec::new(), |r| r.spread.iter().map(|&(l, _)| l).collect());
    let mut out = String::from("model_id,epoch");
    for j in 0..d {
        out.push_str(&format!(",z{j}"));
    }
    for l in &layers {
        out.push_str(&format!(",spread_l{l}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.model_id, r.epoch));
        for v in &r.mean {
            out.push_str(&format!(",{v}"));
        }
        for &(_, s) in &r.spread {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
