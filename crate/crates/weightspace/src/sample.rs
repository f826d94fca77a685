//! Weight generation by sampling in embedding space.
//!
//! New models are drawn token by token from a kernel density estimate fit
//! over prompt-example embeddings (or from a standard Gaussian prior),
//! decoded back to weights, batch-norm conditioned, and filtered by a
//! performance metric. Bootstrapping repeats the loop, re-using the best
//! samples' embeddings as the next round's prompt set; elites are carried
//! forward so the best kept score never decreases.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::embed::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{destandardize, detokenize, tokenize, PreprocessState, TokenSequence};
use crate::zoo::{
    argmax_rows, derive_seed, evaluate, forward_model, leaf_model, train_epoch,
    update_bn_buffers, Architecture, CheckpointMeta, Dataset, ModelCheckpoint,
};

/// Bandwidth floor for degenerate (single- or constant-sample) KDEs.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Scott's rule, h = σ̂·E^(−1/5).
    Scott,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    Kde,
    Gaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Candidates drawn per round.
    pub k: usize,
    /// Models kept per round.
    pub m: usize,
    pub bootstrap_iters: usize,
    pub bandwidth: Bandwidth,
    pub prior: Prior,
    /// Forward passes used for batch-norm conditioning.
    pub bn_batches: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            k: 50,
            m: 5,
            bootstrap_iters: 3,
            bandwidth: Bandwidth::Scott,
            prior: Prior::Kde,
            bn_batches: 10,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.m > self.k {
            return Err(Error::Config(format!(
                "need 0 < m ≤ k, got m={} k={}",
                self.m, self.k
            )));
        }
        if self.bootstrap_iters == 0 {
            return Err(Error::Config("bootstrap needs at least 1 iteration".into()));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if h <= 0.0 {
                return Err(Error::Config("fixed bandwidth must be positive".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// KDE over prompt embeddings
// ---------------------------------------------------------------------------

/// Prompt examples for sampling: per-token latents of already-embedded
/// models.
#[derive(Debug, Clone)]
pub struct PromptSet<T> {
    pub embeddings: Vec<EmbeddingSequence<T>>,
}

/// Factorized per-token, per-dimension 1-D Gaussian KDE.
///
/// Token positions of the target sequence that have no prompt observations
/// (cross-architecture prompting) fall back to the standard Gaussian prior.
#[derive(Debug, Clone)]
pub struct TokenKde {
    /// Target position coordinates, one per token.
    pub positions: Vec<[usize; 3]>,
    /// Per token: `None` = Gaussian fallback; `Some` = kernel centers
    /// (E×d_z, row per prompt example) and per-dimension bandwidths.
    pub tokens: Vec<Option<(Vec<Vec<f64>>, Vec<f64>)>>,
    pub d_z: usize,
}

/// Fit the KDE over prompt embeddings, matched to the target positions by
/// [n, l, k] coordinates.
pub fn fit_kde<T: Scalar>(
    prompts: &PromptSet<T>,
    target_positions: &[[usize; 3]],
    bandwidth: Bandwidth,
) -> Result<TokenKde> {
    if prompts.embeddings.is_empty() {
        return Err(Error::Argument("KDE needs at least one prompt example".into()));
    }
    let d_z = prompts.embeddings[0].z.dims2()?.1;
    if prompts.embeddings.iter().any(|e| e.z.dims2().unwrap().1 != d_z) {
        return Err(Error::Dimension("prompt embeddings differ in d_z".into()));
    }
    let mut tokens = Vec::with_capacity(target_positions.len());
    for pos in target_positions {
        let mut centers: Vec<Vec<f64>> = Vec::new();
        for e in &prompts.embeddings {
            if let Some(row) = e.positions.iter().position(|p| p == pos) {
                centers.push(e.z.row(row).iter().map(|v| v.as_f64()).collect());
            }
        }
        if centers.is_empty() {
            tokens.push(None);
            continue;
        }
        let n = centers.len() as f64;
        let hs: Vec<f64> = (0..d_z)
            .map(|d| match bandwidth {
                Bandwidth::Fixed(h) => h,
                Bandwidth::Scott => {
                    let mean: f64 = centers.iter().map(|c| c[d]).sum::<f64>() / n;
                    let var: f64 =
                        centers.iter().map(|c| (c[d] - mean).powi(2)).sum::<f64>() / n;
                    (var.sqrt() * n.powf(-0.2)).max(BANDWIDTH_FLOOR)
                }
            })
            .collect();
        tokens.push(Some((centers, hs)));
    }
    Ok(TokenKde {
        positions: target_positions.to_vec(),
        tokens,
        d_z,
    })
}

/// Draw `k` embedding sequences (each N×d_z) from the KDE; `None` draws
/// every coordinate from N(0, 1) instead.
pub fn draw_samples<T: Scalar>(
    kde: Option<&TokenKde>,
    target_positions: &[[usize; 3]],
    d_z: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>> {
    if k == 0 {
        return Err(Error::Argument("must draw at least one sample".into()));
    }
    if let Some(kde) = kde {
        if kde.positions != target_positions || kde.d_z != d_z {
            return Err(Error::Argument(
                "KDE was fit for different target positions".into(),
            ));
        }
    }
    let n = target_positions.len();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut z = Tensor::zeros(&[n, d_z]);
        for i in 0..n {
            let token = kde.and_then(|kde| kde.tokens[i].as_ref());
            for d in 0..d_z {
                let g: f64 = rng.sample(StandardNormal);
                let v = match token {
                    // factorized: independent kernel choice per dimension
                    Some((centers, hs)) => {
                        let c = &centers[rng.gen_range(0..centers.len())];
                        c[d] + hs[d] * g
                    }
                    None => g,
                };
                z.set2(i, d, T::from_f64(v));
            }
        }
        out.push(z);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoding and conditioning
// ---------------------------------------------------------------------------

/// Canonical token sequence (layout, positions, mask) of an architecture;
/// token values are meaningless.
pub fn template_sequence<T: Scalar>(arch: &Architecture, d_t: usize) -> Result<TokenSequence<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let meta = CheckpointMeta {
        model_id: "template".into(),
        seed: 0,
        epoch: 0,
    };
    tokenize(&ModelCheckpoint::init(arch, meta, &mut rng)?, d_t)
}

/// Decode latent sequences to checkpoints: haloed chunked decode, masked
/// detokenization, and de-standardization. BN buffers start at (0, 1).
pub fn decode_samples<T: Scalar>(
    model: &Autoencoder<T>,
    zs: &[Tensor<T>],
    arch: &Architecture,
    state: &PreprocessState,
    ws_inf: usize,
    halo: usize,
) -> Result<Vec<ModelCheckpoint<T>>> {
    let template = template_sequence::<T>(arch, model.config.d_t)?;
    let n = template.len();
    zs.par_iter()
        .enumerate()
        .map(|(idx, z)| {
            if z.dims2()?.0 != n {
                return Err(Error::Dimension(format!(
                    "sample has {} tokens, target architecture needs {}",
                    z.dims2()?.0,
                    n
                )));
            }
            let mut tokens = Tensor::zeros(&[n, model.config.d_t]);
            let mut start = 0usize;
            while start < n {
                let end = (start + ws_inf).min(n);
                let lo = start.saturating_sub(halo);
                let hi = (end + halo).min(n);
                let mut zc = Tensor::zeros(&[hi - lo, model.config.d_z]);
                for i in 0..hi - lo {
                    zc.row_mut(i).copy_from_slice(z.row(lo + i));
                }
                let decoded = model.decode_window(&zc, &template.positions[lo..hi])?;
                for i in start..end {
                    tokens.row_mut(i).copy_from_slice(decoded.row(i - lo));
                }
                start = end;
            }
            let seq = TokenSequence {
                tokens,
                positions: template.positions.clone(),
                mask: template.mask.clone(),
                layout: template.layout.clone(),
                d_t: template.d_t,
            };
            let mut ckpt = destandardize(&detokenize(&seq, arch)?, state)?;
            ckpt.meta = CheckpointMeta {
                model_id: format!("sampled{idx:03}"),
                seed: 0,
                epoch: 0,
            };
            Ok(ckpt)
        })
        .collect()
}

/// Update batch-norm running statistics with `batches` training-mode
/// forward passes over cycling slices of `data`; learned weights are
/// untouched. No-op for BN-free models.
pub fn bn_condition<T: Scalar>(
    m: &ModelCheckpoint<T>,
    data: &Dataset<T>,
    batches: usize,
) -> Result<ModelCheckpoint<T>> {
    if m.buffers.iter().all(Option::is_none) {
        return Ok(m.clone());
    }
    if batches == 0 {
        return Err(Error::Argument("conditioning needs at least one batch".into()));
    }
    let mut out = m.clone();
    let n = data.len();
    let batch_size = 32.min(n);
    let d = data.inputs.dims2()?.1;
    for b in 0..batches {
        let start = (b * batch_size) % n;
        let rows: Vec<usize> = (0..batch_size).map(|i| (start + i) % n).collect();
        let mut input = Tensor::zeros(&[rows.len(), d]);
        for (i, &r) in rows.iter().enumerate() {
            input.row_mut(i).copy_from_slice(data.inputs.row(r));
        }
        let mut g = Graph::new();
        let vars = leaf_model(&mut g, &out, false);
        let x = g.constant(input);
        let (_, stats) = forward_model(&mut g, &vars, &out, x, true)?;
        update_bn_buffers(&mut out, &stats);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Selection and bootstrapping
// ---------------------------------------------------------------------------

/// Keep the best `m` candidates by score: descending, ties broken by the
/// lower original index. Returns (original index, score) pairs.
pub fn subsample(scores: &[f64], m: usize) -> Result<Vec<(usize, f64)>> {
    if m > scores.len() {
        return Err(Error::Argument(format!(
            "cannot keep {m} of {} candidates",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order[..m].iter().map(|&i| (i, scores[i])).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub scores: Vec<f64>,
    /// Best score among the kept models after this iteration.
    pub best_kept: f64,
}

pub struct BootstrapOutput<T> {
    /// Final kept models with their selection scores, best first.
    pub kept: Vec<(ModelCheckpoint<T>, f64)>,
    pub trace: Vec<IterationTrace>,
}

/// Alg.-style sampling loop: draw k candidates (KDE over the current prompt
/// set, or Gaussian prior), decode, BN-condition, score with `metric`, and
/// keep the best m together with carried-over elites; the kept embeddings
/// seed the next iteration's KDE.
pub fn bootstrap<T: Scalar>(
    model: &Autoencoder<T>,
    state: &PreprocessState,
    arch: &Architecture,
    prompts: Option<&PromptSet<T>>,
    config: &SampleConfig,
    condition_data: &Dataset<T>,
    select_metric: &(dyn Fn(&ModelCheckpoint<T>) -> Result<f64> + Sync),
) -> Result<BootstrapOutput<T>> {
    config.validate()?;
    if config.prior == Prior::Kde && prompts.is_none_or(|p| p.embeddings.is_empty()) {
        return Err(Error::Argument(
            "KDE prior needs a non-empty prompt set".into(),
        ));
    }
    let template = template_sequence::<T>(arch, model.config.d_t)?;
    let positions = template.positions.clone();
    let d_z = model.config.d_z;
    let ws_inf = model.config.ws;
    let halo = (model.config.ws / 4).max(1);

    // elite pool: (latents, checkpoint, score)
    let mut elites: Vec<(Tensor<T>, ModelCheckpoint<T>, f64)> = Vec::new();
    let mut prompt_latents: Vec<EmbeddingSequence<T>> = match (config.prior, prompts) {
        (Prior::Kde, Some(p)) => p.embeddings.clone(),
        _ => Vec::new(),
    };
    let mut trace = Vec::with_capacity(config.bootstrap_iters);
    for iter in 1..=config.bootstrap_iters {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, iter as u64));
        let kde = if prompt_latents.is_empty() {
            None
        } else {
            Some(fit_kde(
                &PromptSet {
                    embeddings: prompt_latents.clone(),
                },
                &positions,
                config.bandwidth,
            )?)
        };
        let zs = draw_samples::<T>(kde.as_ref(), &positions, d_z, config.k, &mut rng)?;
        let decoded = decode_samples(model, &zs, arch, state, ws_inf, halo)
            .map_err(|e| Error::Data(format!("iteration {iter}: {e}")))?;
        let conditioned: Vec<ModelCheckpoint<T>> = decoded
            .par_iter()
            .map(|c| bn_condition(c, condition_data, config.bn_batches))
            .collect::<Result<_>>()?;
        let scores: Vec<f64> = conditioned
            .par_iter()
            .map(|c| select_metric(c))
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| Error::Data(format!("iteration {iter}: {e}")))?;

        // pool fresh candidates with carried elites, keep the best m
        let mut pool: Vec<(Tensor<T>, ModelCheckpoint<T>, f64)> = zs
            .into_iter()
            .zip(conditioned)
            .zip(&scores)
            .map(|((z, c), &s)| (z, c, s))
            .collect();
        pool.extend(elites.drain(..));
        let pool_scores: Vec<f64> = pool.iter().map(|(_, _, s)| *s).collect();
        let keep = subsample(&pool_scores, config.m.min(pool.len()))?;
        let mut kept: Vec<(Tensor<T>, ModelCheckpoint<T>, f64)> = Vec::with_capacity(keep.len());
        for &(idx, _) in &keep {
            kept.push(pool[idx].clone());
        }
        trace.push(IterationTrace {
            iteration: iter,
            scores,
            best_kept: kept[0].2,
        });
        prompt_latents = kept
            .iter()
            .enumerate()
            .map(|(i, (z, _, _))| EmbeddingSequence {
                model_id: format!("elite{i}"),
                epoch: iter,
                z: z.clone(),
                positions: positions.clone(),
            })
            .collect();
        elites = kept;
    }
    Ok(BootstrapOutput {
        kept: elites.into_iter().map(|(_, c, s)| (c, s)).collect(),
        trace,
    })
}

// ---------------------------------------------------------------------------
// Evaluation harnesses
// ---------------------------------------------------------------------------

/// Supervised fine-tuning from given weights; returns (epoch, test accuracy)
/// with epoch 0 being the zero-shot accuracy.
pub fn finetune<T: Scalar>(
    m: &ModelCheckpoint<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(ModelCheckpoint<T>, Vec<(usize, f64)>)> {
    let mut model = m.clone();
    let mut opt = AdamW::new(
        T::from_f64(lr),
        (T::from_f64(0.9), T::from_f64(0.999)),
        T::from_f64(1e-8),
        T::from_f64(1e-4),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectory = Vec::with_capacity(epochs + 1);
    let (acc, _) = evaluate(&model, test)?;
    trajectory.push((0, acc));
    for epoch in 1..=epochs {
        let loss = train_epoch(&mut model, train, &mut opt, batch_size, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "fine-tuning diverged at epoch {epoch}"
            )));
        }
        let (acc, _) = evaluate(&model, test)?;
        trajectory.push((epoch, acc));
    }
    Ok((model, trajectory))
}

/// Ensemble accuracy: average the models' softmax outputs, then argmax
/// (ties to the lowest class index).
pub fn ensemble_eval<T: Scalar>(models: &[&ModelCheckpoint<T>], data: &Dataset<T>) -> Result<f64> {
    if models.len() < 2 {
        return Err(Error::Argument("an ensemble needs at least 2 models".into()));
    }
    let classes = models[0].arch.layers.last().unwrap().out_dim;
    if models
        .iter()
        .any(|m| m.arch.layers.last().unwrap().out_dim != classes)
    {
        return Err(Error::Argument("ensemble output dimensions differ".into()));
    }
    let n = data.len();
    let mut mean_probs = Tensor::<T>::zeros(&[n, classes]);
    for m in models {
        let mut g = Graph::new();
        let vars = leaf_model(&mut g, m, false);
        let input = g.constant(data.inputs.clone());
        let (logits, _) = forward_model(&mut g, &vars, m, input, false)?;
        let probs = g.softmax(logits, 1)?;
        let pv = g.value(probs);
        for (acc, &p) in mean_probs.data_mut().iter_mut().zip(pv.data()) {
            *acc = *acc + p;
        }
    }
    let preds = argmax_rows(&mean_probs);
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingReport {
    pub config: SampleConfig,
    pub trace: Vec<IterationTrace>,
    /// Paths of the emitted checkpoint containers, best first.
    pub checkpoints: Vec<String>,
}

/// Persist kept models (container per model) plus a JSON report.
pub fn write_sampling_report<T: Scalar>(
    dir: &Path,
    config: &SampleConfig,
    out: &BootstrapOutput<T>,
) -> Result<SamplingReport> {
    std::fs::create_dir_all(dir)?;
    let mut checkpoints = Vec::with_capacity(out.kept.len());
    for (i, (ckpt, _)) in out.kept.iter().enumerate() {
        let sub = dir.join(format!("kept{i:02}"));
        std::fs::create_dir_all(&sub)?;
        crate::zoo::save_checkpoint(&sub, ckpt)?;
        checkpoints.push(sub.to_string_lossy().into_owned());
    }
    let report = SamplingReport {
        config: config.clone(),
        trace: out.trace.clone(),
        checkpoints,
    };
    std::fs::write(
        dir.join("sampling.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
