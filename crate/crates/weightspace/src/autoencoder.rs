//! Sequential transformer autoencoder over weight tokens.
//!
//! Token windows are projected to `d_model`, summed with three learned
//! position embeddings (global index, layer, index-in-layer), passed through
//! a pre-norm transformer encoder, and compressed per token to a `d_z`
//! bottleneck. The decoder mirrors this: latents are up-projected, re-tagged
//! with the same position embeddings, and decoded back to token space.
//!
//! Pretraining minimizes (1−γ)·masked-MSE + γ·NT-Xent, where the contrastive
//! views of a window are its aligned form and a freshly permuted form of the
//! same model (plus mask-respecting noise), window latents being mean-pooled
//! and pushed through a small projection head before the cosine comparison.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{apply_permutation, random_permutation_set};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{onecycle_lr, AdamW};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{
    compute_preprocess_state, slice_window, standardize, tokenize, windows_per_model,
    PreprocessState, TokenSequence, TokenWindow,
};
use crate::zoo::{derive_seed, ModelCheckpoint, Split, Zoo};

const LN_EPS: f64 = 1e-5;
const FF_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    /// Token width.
    pub d_t: usize,
    /// Per-token bottleneck width.
    pub d_z: usize,
    /// Projection-head output width (contrastive space).
    pub d_proj: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Training window size in tokens.
    pub ws: usize,
    /// Position-table capacities for [n, l, k]; positions are 1-based and
    /// overflowing them is a hard capacity error.
    pub cap_n: usize,
    pub cap_l: usize,
    pub cap_k: usize,
    /// Contrastive weight in (1−γ)·L_rec + γ·L_c.
    pub gamma: f64,
    /// NT-Xent temperature.
    pub tau: f64,
    /// Std of the additive-noise augmentation.
    pub sigma: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    /// Windows per optimizer step (each contributes two views).
    pub batch_size: usize,
    pub seed: u64,
}

impl AutoencoderConfig {
    /// Small defaults sized for desk-scale zoos; capacities must still be
    /// fitted to a zoo via [`fit_capacities`](Self::fit_capacities).
    pub fn desk_default(d_t: usize) -> Self {
        Self {
            d_t,
            d_z: 16,
            d_proj: 16,
            d_model: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ws: 16,
            cap_n: 0,
            cap_l: 0,
            cap_k: 0,
            gamma: 0.05,
            tau: 0.1,
            sigma: 0.05,
            lr_max: 1e-3,
            weight_decay: 1e-4,
            epochs: 50,
            patience: 10,
            batch_size: 32,
            seed: 0,
        }
    }

    /// Size the position tables at twice the zoo's maxima, so models of the
    /// same family with longer token sequences can still be embedded.
    pub fn fit_capacities<T: Scalar>(&mut self, seq: &TokenSequence<T>) {
        let max_n = seq.len();
        let max_l = seq.positions.iter().map(|p| p[1]).max().unwrap_or(1);
        let max_k = seq.positions.iter().map(|p| p[2]).max().unwrap_or(1);
        self.cap_n = 2 * max_n;
        self.cap_l = 2 * max_l;
        self.cap_k = 2 * max_k;
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of head count {}",
                self.d_model, self.heads
            )));
        }
        if self.d_z == 0 || self.d_z > 4 * self.d_t {
            return Err(Error::Config(format!(
                "bottleneck width {} outside (0, {}]",
                self.d_z,
                4 * self.d_t
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("loss mix must lie in [0, 1]".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.ws == 0 || self.d_t == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "window size and token width must be positive; batch size at least 2".into(),
            ));
        }
        if self.cap_n == 0 || self.cap_l == 0 || self.cap_k == 0 {
            return Err(Error::Config(
                "position capacities are unset; fit them to a zoo first".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub ff1_w: Tensor<T>,
    pub ff1_b: Tensor<T>,
    pub ff2_w: Tensor<T>,
    pub ff2_b: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn init(d_model: usize, rng: &mut impl Rng) -> Self {
        let d_ff = FF_MULT * d_model;
        Self {
            ln1_g: Tensor::ones(&[1, d_model]),
            ln1_b: Tensor::zeros(&[1, d_model]),
            wq: xavier(d_model, d_model, rng),
            bq: Tensor::zeros(&[1, d_model]),
            wk: xavier(d_model, d_model, rng),
            bk: Tensor::zeros(&[1, d_model]),
            wv: xavier(d_model, d_model, rng),
            bv: Tensor::zeros(&[1, d_model]),
            wo: xavier(d_model, d_model, rng),
            bo: Tensor::zeros(&[1, d_model]),
            ln2_g: Tensor::ones(&[1, d_model]),
            ln2_b: Tensor::zeros(&[1, d_model]),
            ff1_w: xavier(d_ff, d_model, rng),
            ff1_b: Tensor::zeros(&[1, d_ff]),
            ff2_w: xavier(d_model, d_ff, rng),
            ff2_b: Tensor::zeros(&[1, d_model]),
        }
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.ff1_w, &self.ff1_b,
            &self.ff2_w, &self.ff2_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.ff1_w, &mut self.ff1_b,
            &mut self.ff2_w, &mut self.ff2_b,
        ]
    }

    fn names(prefix: &str) -> Vec<String> {
        [
            "ln1.g", "ln1.b", "attn.q.w", "attn.q.b", "attn.k.w", "attn.k.b", "attn.v.w",
            "attn.v.b", "attn.o.w", "attn.o.b", "ln2.g", "ln2.b", "ff1.w", "ff1.b", "ff2.w",
            "ff2.b",
        ]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
    }
}

fn xavier<T: Scalar, R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Tensor<T> {
    let std = T::from_f64((2.0 / (in_dim + out_dim) as f64).sqrt());
    Tensor::randn(&[out_dim, in_dim], std, rng)
}

#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    pub config: AutoencoderConfig,
    pub in_w: Tensor<T>,
    pub in_b: Tensor<T>,
    pub pos_n: Tensor<T>,
    pub pos_l: Tensor<T>,
    pub pos_k: Tensor<T>,
    pub encoder: Vec<Block<T>>,
    pub enc_ln_g: Tensor<T>,
    pub enc_ln_b: Tensor<T>,
    pub down_w: Tensor<T>,
    pub down_b: Tensor<T>,
    pub up_w: Tensor<T>,
    pub up_b: Tensor<T>,
    pub decoder: Vec<Block<T>>,
    pub dec_ln_g: Tensor<T>,
    pub dec_ln_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
    pub proj1_w: Tensor<T>,
    pub proj1_b: Tensor<T>,
    pub proj2_w: Tensor<T>,
    pub proj2_b: Tensor<T>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn init(config: &AutoencoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let pos_std = T::from_f64(0.02);
        Ok(Self {
            config: config.clone(),
            in_w: xavier(d, config.d_t, rng),
            in_b: Tensor::zeros(&[1, d]),
            pos_n: Tensor::randn(&[config.cap_n, d], pos_std, rng),
            pos_l: Tensor::randn(&[config.cap_l, d], pos_std, rng),
            pos_k: Tensor::randn(&[config.cap_k, d], pos_std, rng),
            encoder: (0..config.enc_layers).map(|_| Block::init(d, rng)).collect(),
            enc_ln_g: Tensor::ones(&[1, d]),
            enc_ln_b: Tensor::zeros(&[1, d]),
            down_w: xavier(config.d_z, d, rng),
            down_b: Tensor::zeros(&[1, config.d_z]),
            up_w: xavier(d, config.d_z, rng),
            up_b: Tensor::zeros(&[1, d]),
            decoder: (0..config.dec_layers).map(|_| Block::init(d, rng)).collect(),
            dec_ln_g: Tensor::ones(&[1, d]),
            dec_ln_b: Tensor::zeros(&[1, d]),
            out_w: xavier(config.d_t, d, rng),
            out_b: Tensor::zeros(&[1, config.d_t]),
            proj1_w: xavier(config.d_z, config.d_z, rng),
            proj1_b: Tensor::zeros(&[1, config.d_z]),
            proj2_w: xavier(config.d_proj, config.d_z, rng),
            proj2_b: Tensor::zeros(&[1, config.d_proj]),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "in.w".into(),
            "in.b".into(),
            "pos.n".into(),
            "pos.l".into(),
            "pos.k".into(),
        ];
        for i in 0..self.encoder.len() {
            names.extend(Block::<T>::names(&format!("enc{i}")));
        }
        names.push("enc_ln.g".into());
        names.push("enc_ln.b".into());
        names.extend(["down.w".into(), "down.b".into(), "up.w".into(), "up.b".into()]);
        for i in 0..self.decoder.len() {
            names.extend(Block::<T>::names(&format!("dec{i}")));
        }
        names.push("dec_ln.g".into());
        names.push("dec_ln.b".into());
        names.extend([
            "out.w".into(),
            "out.b".into(),
            "proj1.w".into(),
            "proj1.b".into(),
            "proj2.w".into(),
            "proj2.b".into(),
        ]);
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.in_w, &self.in_b, &self.pos_n, &self.pos_l, &self.pos_k];
        for b in &self.encoder {
            out.extend(b.params());
        }
        out.push(&self.enc_ln_g);
        out.push(&self.enc_ln_b);
        out.extend([&self.down_w, &self.down_b, &self.up_w, &self.up_b]);
        for b in &self.decoder {
            out.extend(b.params());
        }
        out.push(&self.dec_ln_g);
        out.push(&self.dec_ln_b);
        out.extend([
            &self.out_w,
            &self.out_b,
            &self.proj1_w,
            &self.proj1_b,
            &self.proj2_w,
            &self.proj2_b,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.in_w,
            &mut self.in_b,
            &mut self.pos_n,
            &mut self.pos_l,
            &mut self.pos_k,
        ];
        for b in &mut self.encoder {
            out.extend(b.params_mut());
        }
        out.push(&mut self.enc_ln_g);
        out.push(&mut self.enc_ln_b);
        out.extend([
            &mut self.down_w,
            &mut self.down_b,
            &mut self.up_w,
            &mut self.up_b,
        ]);
        for b in &mut self.decoder {
            out.extend(b.params_mut());
        }
        out.push(&mut self.dec_ln_g);
        out.push(&mut self.dec_ln_b);
        out.extend([
            &mut self.out_w,
            &mut self.out_b,
            &mut self.proj1_w,
            &mut self.proj1_b,
            &mut self.proj2_w,
            &mut self.proj2_b,
        ]);
        out
    }

    /// Eval-mode per-token latents for one window.
    pub fn encode_window(
        &self,
        tokens: &Tensor<T>,
        positions: &[[usize; 3]],
    ) -> Result<Tensor<T>> {
        if positions.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.d_z]));
        }
        let mut g = Graph::new();
        let vars = leaf_autoencoder(&mut g, self, false);
        let t = g.constant(tokens.clone());
        let z = encode_graph(&mut g, &vars, &self.config, t, positions, &[positions.len()])?;
        Ok(g.value(z).clone())
    }

    /// Eval-mode token reconstruction for one window of latents.
    pub fn decode_window(&self, z: &Tensor<T>, positions: &[[usize; 3]]) -> Result<Tensor<T>> {
        if positions.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.d_t]));
        }
        let mut g = Graph::new();
        let vars = leaf_autoencoder(&mut g, self, false);
        let zv = g.constant(z.clone());
        let t = decode_graph(&mut g, &vars, &self.config, zv, positions, &[positions.len()])?;
        Ok(g.value(t).clone())
    }
}

// ---------------------------------------------------------------------------
// Graph-side forward
// ---------------------------------------------------------------------------

pub(crate) struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    ff1_w: Var,
    ff1_b: Var,
    ff2_w: Var,
    ff2_b: Var,
}

pub(crate) struct AeVars {
    pub flat: Vec<Var>,
    in_w: Var,
    in_b: Var,
    pos_n: Var,
    pos_l: Var,
    pos_k: Var,
    encoder: Vec<BlockVars>,
    enc_ln_g: Var,
    enc_ln_b: Var,
    down_w: Var,
    down_b: Var,
    up_w: Var,
    up_b: Var,
    decoder: Vec<BlockVars>,
    dec_ln_g: Var,
    dec_ln_b: Var,
    out_w: Var,
    out_b: Var,
    proj1_w: Var,
    proj1_b: Var,
    proj2_w: Var,
    proj2_b: Var,
}

/// Insert every model parameter into the graph, mirroring
/// [`Autoencoder::params`] order in `flat`.
pub(crate) fn leaf_autoencoder<T: Scalar>(
    g: &mut Graph<T>,
    m: &Autoencoder<T>,
    requires_grad: bool,
) -> AeVars {
    let flat: Vec<Var> = m
        .params()
        .into_iter()
        .map(|t| g.leaf(t.clone(), requires_grad))
        .collect();
    let mut it = flat.iter().copied();
    let mut take = || it.next().expect("flat parameter list exhausted");
    let block = |take: &mut dyn FnMut() -> Var| BlockVars {
        ln1_g: take(),
        ln1_b: take(),
        wq: take(),
        bq: take(),
        wk: take(),
        bk: take(),
        wv: take(),
        bv: take(),
        wo: take(),
        bo: take(),
        ln2_g: take(),
        ln2_b: take(),
        ff1_w: take(),
        ff1_b: take(),
        ff2_w: take(),
        ff2_b: take(),
    };
    let in_w = take();
    let in_b = take();
    let pos_n = take();
    let pos_l = take();
    let pos_k = take();
    let encoder = (0..m.encoder.len()).map(|_| block(&mut take)).collect();
    let enc_ln_g = take();
    let enc_ln_b = take();
    let down_w = take();
    let down_b = take();
    let up_w = take();
    let up_b = take();
    let decoder = (0..m.decoder.len()).map(|_| block(&mut take)).collect();
    let dec_ln_g = take();
    let dec_ln_b = take();
    let out_w = take();
    let out_b = take();
    let proj1_w = take();
    let proj1_b = take();
    let proj2_w = take();
    let proj2_b = take();
    AeVars {
        flat,
        in_w,
        in_b,
        pos_n,
        pos_l,
        pos_k,
        encoder,
        enc_ln_g,
        enc_ln_b,
        down_w,
        down_b,
        up_w,
        up_b,
        decoder,
        dec_ln_g,
        dec_ln_b,
        out_w,
        out_b,
        proj1_w,
        proj1_b,
        proj2_w,
        proj2_b,
    }
}

fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    g.add(y, b)
}

/// Pre-norm transformer block over a batch of consecutive-row windows;
/// attention mixes rows only within each window.
fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &BlockVars,
    x: Var,
    lens: &[usize],
    heads: usize,
) -> Result<Var> {
    let eps = T::from_f64(LN_EPS);
    let h = g.layer_norm(x, b.ln1_g, b.ln1_b, eps)?;
    let q = affine(g, h, b.wq, b.bq)?;
    let k = affine(g, h, b.wk, b.bk)?;
    let v = affine(g, h, b.wv, b.bv)?;
    let d_model = g.value(q).dims2()?.1;
    let dh = d_model / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut window_outs = Vec::with_capacity(lens.len());
    let mut offset = 0usize;
    for &len in lens {
        let rows: Vec<usize> = (offset..offset + len).collect();
        let qw = g.gather_rows(q, &rows)?;
        let kw = g.gather_rows(k, &rows)?;
        let vw = g.gather_rows(v, &rows)?;
        let mut head_outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_cols(qw, hd * dh, (hd + 1) * dh)?;
            let kh = g.slice_cols(kw, hd * dh, (hd + 1) * dh)?;
            let vh = g.slice_cols(vw, hd * dh, (hd + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale);
            let attn = g.softmax(scaled, 1)?;
            head_outs.push(g.matmul(attn, vh)?);
        }
        window_outs.push(g.concat_cols(&head_outs)?);
        offset += len;
    }
    let att = g.concat_rows(&window_outs)?;
    let att = affine(g, att, b.wo, b.bo)?;
    let x = g.add(x, att)?;
    let h2 = g.layer_norm(x, b.ln2_g, b.ln2_b, eps)?;
    let f = affine(g, h2, b.ff1_w, b.ff1_b)?;
    let f = g.gelu(f);
    let f = affine(g, f, b.ff2_w, b.ff2_b)?;
    g.add(x, f)
}

/// Sum of the three position embeddings for 1-based [n, l, k] coordinates.
fn position_embedding<T: Scalar>(
    g: &mut Graph<T>,
    vars: &AeVars,
    positions: &[[usize; 3]],
) -> Result<Var> {
    for p in positions {
        if p[0] == 0 || p[1] == 0 || p[2] == 0 {
            return Err(Error::Argument("positions are 1-based".into()));
        }
    }
    let n_idx: Vec<usize> = positions.iter().map(|p| p[0] - 1).collect();
    let l_idx: Vec<usize> = positions.iter().map(|p| p[1] - 1).collect();
    let k_idx: Vec<usize> = positions.iter().map(|p| p[2] - 1).collect();
    let en = g.gather_rows(vars.pos_n, &n_idx)?;
    let el = g.gather_rows(vars.pos_l, &l_idx)?;
    let ek = g.gather_rows(vars.pos_k, &k_idx)?;
    let nl = g.add(en, el)?;
    g.add(nl, ek)
}

/// Encode a batch of windows (consecutive row ranges of `tokens`) to
/// per-token latents `[total, d_z]`.
pub(crate) fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &AeVars,
    cfg: &AutoencoderConfig,
    tokens: Var,
    positions: &[[usize; 3]],
    lens: &[usize],
) -> Result<Var> {
    let mut x = affine(g, tokens, vars.in_w, vars.in_b)?;
    let pos = position_embedding(g, vars, positions)?;
    x = g.add(x, pos)?;
    for b in &vars.encoder {
        x = block_forward(g, b, x, lens, cfg.heads)?;
    }
    let eps = T::from_f64(LN_EPS);
    x = g.layer_norm(x, vars.enc_ln_g, vars.enc_ln_b, eps)?;
    affine(g, x, vars.down_w, vars.down_b)
}

/// Decode per-token latents back to token space `[total, d_t]`.
pub(crate) fn decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &AeVars,
    cfg: &AutoencoderConfig,
    z: Var,
    positions: &[[usize; 3]],
    lens: &[usize],
) -> Result<Var> {
    let mut x = affine(g, z, vars.up_w, vars.up_b)?;
    let pos = position_embedding(g, vars, positions)?;
    x = g.add(x, pos)?;
    for b in &vars.decoder {
        x = block_forward(g, b, x, lens, cfg.heads)?;
    }
    let eps = T::from_f64(LN_EPS);
    x = g.layer_norm(x, vars.dec_ln_g, vars.dec_ln_b, eps)?;
    affine(g, x, vars.out_w, vars.out_b)
}

/// Projection head + L2 normalization for contrastive comparison.
fn project_graph<T: Scalar>(g: &mut Graph<T>, vars: &AeVars, pooled: Var) -> Result<Var> {
    let h = affine(g, pooled, vars.proj1_w, vars.proj1_b)?;
    let h = g.relu(h);
    let p = affine(g, h, vars.proj2_w, vars.proj2_b)?;
    g.l2_normalize_rows(p)
}

/// Mean-pool each window's latent rows to `[windows, d_z]`.
fn pool_windows<T: Scalar>(g: &mut Graph<T>, z: Var, lens: &[usize]) -> Result<Var> {
    let mut pooled = Vec::with_capacity(lens.len());
    let mut offset = 0usize;
    for &len in lens {
        let rows: Vec<usize> = (offset..offset + len).collect();
        let zw = g.gather_rows(z, &rows)?;
        pooled.push(g.mean_rows(zw)?);
        offset += len;
    }
    g.concat_rows(&pooled)
}

/// NT-Xent over paired window latents: rows [0, B) of the pooled batch are
/// first views, rows [B, 2B) their positives.
fn contrastive_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &AeVars,
    z: Var,
    lens: &[usize],
    tau: f64,
) -> Result<Var> {
    let pairs = lens.len() / 2;
    if pairs < 2 || lens.len() % 2 != 0 {
        return Err(Error::Argument(
            "contrastive loss needs at least two window pairs".into(),
        ));
    }
    let pooled = pool_windows(g, z, lens)?;
    let proj = project_graph(g, vars, pooled)?;
    let pt = g.transpose(proj)?;
    let sim = g.matmul(proj, pt)?;
    let sim = g.scale(sim, T::from_f64(1.0 / tau));
    let positives: Vec<usize> = (0..2 * pairs)
        .map(|r| if r < pairs { r + pairs } else { r - pairs })
        .collect();
    g.ntxent_from_similarities(sim, &positives)
}

// ---------------------------------------------------------------------------
// Loss wrappers and augmentations
// ---------------------------------------------------------------------------

/// Masked mean-squared reconstruction error (value level).
pub fn loss_reconstruction<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let m = g.constant(mask.clone());
    let l = g.mse_masked(p, t, m)?;
    Ok(g.value(l).item())
}

/// Contrastive loss between two batches of window latents (value level).
/// `z_i[b]` and `z_j[b]` are the two views of window `b`.
pub fn loss_contrastive<T: Scalar>(
    model: &Autoencoder<T>,
    z_i: &[Tensor<T>],
    z_j: &[Tensor<T>],
    tau: f64,
) -> Result<T> {
    if z_i.len() != z_j.len() {
        return Err(Error::Argument("view batches differ in length".into()));
    }
    if z_i.len() < 2 {
        return Err(Error::Argument(
            "contrastive loss needs at least 2 window pairs".into(),
        ));
    }
    let mut g = Graph::new();
    let vars = leaf_autoencoder(&mut g, model, false);
    let mut lens = Vec::new();
    let mut parts = Vec::new();
    for z in z_i.iter().chain(z_j) {
        lens.push(z.dims2()?.0);
        parts.push(g.constant(z.clone()));
    }
    let z = g.concat_rows(&parts)?;
    let l = contrastive_graph(&mut g, &vars, z, &lens, tau)?;
    Ok(g.value(l).item())
}

/// Add N(0, σ²) noise to signal entries only; padding stays untouched.
pub fn augment_noise<T: Scalar>(
    tokens: &Tensor<T>,
    mask: &Tensor<T>,
    sigma: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    if sigma == 0.0 {
        return tokens.clone();
    }
    let s = T::from_f64(sigma);
    let mut out = tokens.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m != T::zero() {
            let z: f64 = rng.sample(StandardNormal);
            *v = *v + s * T::from_f64(z);
        }
    }
    out
}

/// Permutation augmentation: re-basin the whole model with a random valid
/// permutation set, then re-tokenize. Must happen before windowing.
pub fn augment_permute<T: Scalar>(
    ckpt: &ModelCheckpoint<T>,
    d_t: usize,
    rng: &mut impl Rng,
) -> Result<TokenSequence<T>> {
    let pset = random_permutation_set(&ckpt.arch, rng);
    tokenize(&apply_permutation(ckpt, &pset)?, d_t)
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_rec: f64,
    pub train_con: f64,
    pub val_rec: f64,
    pub val_con: f64,
}

pub struct PretrainOutput<T> {
    pub model: Autoencoder<T>,
    pub state: PreprocessState,
    pub log: Vec<EpochLog>,
}

struct BatchTensors<T> {
    input: Tensor<T>,
    target: Tensor<T>,
    mask: Tensor<T>,
    positions: Vec<[usize; 3]>,
    lens: Vec<usize>,
}

/// Concatenate window views row-wise: first all first views, then all
/// second views, so window b pairs with window b + B.
fn assemble_batch<T: Scalar>(
    views: &[(TokenWindow<T>, Tensor<T>)], // (window with clean tokens, noisy input tokens)
    d_t: usize,
) -> BatchTensors<T> {
    let total: usize = views.iter().map(|(w, _)| w.positions.len()).sum();
    let mut input = Tensor::zeros(&[total, d_t]);
    let mut target = Tensor::zeros(&[total, d_t]);
    let mut mask = Tensor::zeros(&[total, d_t]);
    let mut positions = Vec::with_capacity(total);
    let mut lens = Vec::with_capacity(views.len());
    let mut row = 0usize;
    for (w, noisy) in views {
        let len = w.positions.len();
        lens.push(len);
        for i in 0..len {
            input.row_mut(row).copy_from_slice(noisy.row(i));
            target.row_mut(row).copy_from_slice(w.tokens.row(i));
            mask.row_mut(row).copy_from_slice(w.mask.row(i));
            positions.push(w.positions[i]);
            row += 1;
        }
    }
    BatchTensors {
        input,
        target,
        mask,
        positions,
        lens,
    }
}

/// One training step over an assembled batch; returns (L_rec, L_c).
fn train_step<T: Scalar>(
    model: &mut Autoencoder<T>,
    opt: &mut AdamW<T>,
    batch: &BatchTensors<T>,
    lr: f64,
) -> Result<(f64, f64)> {
    let cfg = model.config.clone();
    let mut g = Graph::new();
    let vars = leaf_autoencoder(&mut g, model, true);
    let input = g.constant(batch.input.clone());
    let target = g.constant(batch.target.clone());
    let mask = g.constant(batch.mask.clone());
    let z = encode_graph(&mut g, &vars, &cfg, input, &batch.positions, &batch.lens)?;
    let pred = decode_graph(&mut g, &vars, &cfg, z, &batch.positions, &batch.lens)?;
    let rec = g.mse_masked(pred, target, mask)?;
    let (total, con_v) = if cfg.gamma > 0.0 {
        let con = contrastive_graph(&mut g, &vars, z, &batch.lens, cfg.tau)?;
        let rec_w = g.scale(rec, T::from_f64(1.0 - cfg.gamma));
        let con_w = g.scale(con, T::from_f64(cfg.gamma));
        (g.add(rec_w, con_w)?, g.value(con).item().as_f64())
    } else {
        (rec, 0.0)
    };
    let rec_v = g.value(rec).item().as_f64();
    if !g.value(total).item().as_f64().is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (rec {rec_v}, con {con_v})"
        )));
    }
    let mut grads = g.backward(total)?;
    // with gamma = 0 the contrastive projection head sits outside the loss
    // and gets no gradient; it still occupies optimizer slots
    let grad_owned: Vec<Tensor<T>> = vars
        .flat
        .iter()
        .map(|v| {
            grads[v.index()]
                .take()
                .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()))
        })
        .collect();
    let grad_refs: Vec<&Tensor<T>> = grad_owned.iter().collect();
    opt.lr = T::from_f64(lr);
    let mut params = model.params_mut();
    opt.step(&mut params, &grad_refs)?;
    Ok((rec_v, con_v))
}

/// Eval-mode losses over full-coverage chunks of the given sequences.
fn eval_losses<T: Scalar>(
    model: &Autoencoder<T>,
    seqs: &[&TokenSequence<T>],
    ckpts: &[&ModelCheckpoint<T>],
    state: &PreprocessState,
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views: Vec<(TokenWindow<T>, Tensor<T>)> = Vec::new();
    let mut firsts: Vec<TokenWindow<T>> = Vec::new();
    let mut seconds: Vec<TokenWindow<T>> = Vec::new();
    for (seq, ckpt) in seqs.iter().zip(ckpts) {
        let std = standardize(ckpt, state)?;
        let permuted = augment_permute(&std, cfg.d_t, &mut rng)?;
        let mut start = 0usize;
        while start < seq.len() {
            let len = cfg.ws.min(seq.len() - start);
            firsts.push(slice_window(seq, start, len));
            seconds.push(slice_window(&permuted, start, len));
            start += len;
        }
    }
    let canonical_rows: usize = firsts.iter().map(|w| w.positions.len()).sum();
    for w in firsts.into_iter().chain(seconds) {
        let clean = w.tokens.clone();
        views.push((w, clean));
    }
    let mut batch = assemble_batch(&views, cfg.d_t);
    // the permuted second views exist only for the contrastive pairing;
    // reconstruction quality is measured on the canonical views alone
    for row in canonical_rows..batch.mask.shape()[0] {
        batch.mask.row_mut(row).fill(T::zero());
    }
    let mut g = Graph::new();
    let vars = leaf_autoencoder(&mut g, model, false);
    let input = g.constant(batch.input.clone());
    let target = g.constant(batch.target.clone());
    let mask = g.constant(batch.mask.clone());
    let z = encode_graph(&mut g, &vars, cfg, input, &batch.positions, &batch.lens)?;
    let pred = decode_graph(&mut g, &vars, cfg, z, &batch.positions, &batch.lens)?;
    let rec = g.mse_masked(pred, target, mask)?;
    let con = contrastive_graph(&mut g, &vars, z, &batch.lens, cfg.tau)?;
    Ok((
        g.value(rec).item().as_f64(),
        g.value(con).item().as_f64(),
    ))
}

/// Pretrain on an aligned zoo: per epoch, ceil(N/ws) random windows per
/// training checkpoint, contrastive views aligned-vs-permuted, one-cycle
/// learning rate, early stopping on validation loss. Returns the weights of
/// the best validation epoch.
pub fn pretrain<T: Scalar>(zoo: &Zoo<T>, config: &AutoencoderConfig) -> Result<PretrainOutput<T>> {
    let mut config = config.clone();
    let train_ids = zoo.split_ids(Split::Train);
    let val_ids = zoo.split_ids(Split::Val);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::Data("zoo has empty train or val split".into()));
    }
    let train_ckpts: Vec<&ModelCheckpoint<T>> = zoo
        .checkpoints
        .iter()
        .filter(|c| train_ids.contains(&c.meta.model_id))
        .collect();
    let val_ckpts: Vec<&ModelCheckpoint<T>> = zoo
        .checkpoints
        .iter()
        .filter(|c| val_ids.contains(&c.meta.model_id))
        .collect();
    let state = compute_preprocess_state(&train_ckpts, config.d_t)?;
    let std_train: Vec<ModelCheckpoint<T>> = train_ckpts
        .iter()
        .map(|c| standardize(c, &state))
        .collect::<Result<_>>()?;
    let train_seqs: Vec<TokenSequence<T>> = std_train
        .iter()
        .map(|c| tokenize(c, config.d_t))
        .collect::<Result<_>>()?;
    let val_seqs: Vec<TokenSequence<T>> = val_ckpts
        .iter()
        .map(|c| Ok(tokenize(&standardize(c, &state)?, config.d_t)?))
        .collect::<Result<_>>()?;
    if config.cap_n == 0 {
        config.fit_capacities(&train_seqs[0]);
    }
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Autoencoder::init(&config, &mut rng)?;
    let mut opt = AdamW::new(
        T::from_f64(config.lr_max),
        (T::from_f64(0.9), T::from_f64(0.999)),
        T::from_f64(1e-8),
        T::from_f64(config.weight_decay),
    );

    let windows_total: usize = train_seqs
        .iter()
        .map(|s| windows_per_model(s.len(), config.ws))
        .sum();
    let steps_per_epoch = windows_total.div_ceil(config.batch_size).max(1);
    let total_steps = (config.epochs * steps_per_epoch).max(1);

    let mut log = Vec::new();
    let mut best: Option<(f64, Autoencoder<T>)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        // fresh permuted views of every training model for this epoch
        let permuted: Vec<TokenSequence<T>> = if config.gamma > 0.0 {
            std_train
                .iter()
                .map(|c| augment_permute(c, config.d_t, &mut epoch_rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        // k = ceil(N/ws) window draws per checkpoint
        let mut draws: Vec<(usize, usize)> = Vec::with_capacity(windows_total);
        for (ti, seq) in train_seqs.iter().enumerate() {
            let n = seq.len();
            let len = config.ws.min(n);
            for _ in 0..windows_per_model(n, config.ws) {
                let start = if n > len {
                    epoch_rng.gen_range(0..=n - len)
                } else {
                    0
                };
                draws.push((ti, start));
            }
        }
        use rand::seq::SliceRandom;
        draws.shuffle(&mut epoch_rng);

        let mut rec_sum = 0.0;
        let mut con_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = config.lr_max;
        for chunk in draws.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue; // a lone window has no in-batch negatives
            }
            let mut views = Vec::with_capacity(2 * chunk.len());
            let mut seconds = Vec::with_capacity(chunk.len());
            for &(ti, start) in chunk {
                let seq = &train_seqs[ti];
                let len = config.ws.min(seq.len());
                let w1 = slice_window(seq, start, len);
                let noisy1 = augment_noise(&w1.tokens, &w1.mask, config.sigma, &mut epoch_rng);
                views.push((w1, noisy1));
                if config.gamma > 0.0 {
                    // permuted second views exist only for the contrastive pairs
                    let w2 = slice_window(&permuted[ti], start, len);
                    let noisy2 =
                        augment_noise(&w2.tokens, &w2.mask, config.sigma, &mut epoch_rng);
                    seconds.push((w2, noisy2));
                }
            }
            views.extend(seconds);
            let batch = assemble_batch(&views, config.d_t);
            lr = onecycle_lr(step, total_steps, config.lr_max, 0.3, 25.0, 1e4)?;
            let (rec, con) = train_step(&mut model, &mut opt, &batch, lr).map_err(|e| {
                Error::Numeric(format!("epoch {epoch}, step {step}: {e}"))
            })?;
            rec_sum += rec;
            con_sum += con;
            batches += 1;
            step += 1;
        }

        let val_seq_refs: Vec<&TokenSequence<T>> = val_seqs.iter().collect();
        let (val_rec, val_con) = eval_losses(
            &model,
            &val_seq_refs,
            &val_ckpts,
            &state,
            derive_seed(config.seed, 0xEA11 + epoch as u64),
        )?;
        log.push(EpochLog {
            epoch,
            lr,
            train_rec: rec_sum / batches.max(1) as f64,
            train_con: con_sum / batches.max(1) as f64,
            val_rec,
            val_con,
        });
        let val_total = (1.0 - config.gamma) * val_rec + config.gamma * val_con;
        if !val_total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        if best.as_ref().is_none_or(|(b, _)| val_total < *b) {
            best = Some((val_total, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok(PretrainOutput {
        model: best_model,
        state,
        log,
    })
}

/// Training log as CSV.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_rec,train_con,val_rec,val_con\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.train_rec, e.train_con, e.val_rec, e.val_con
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn save_autoencoder<T: Scalar>(
    dir: &Path,
    model: &Autoencoder<T>,
    state: &PreprocessState,
) -> Result<()> {
    let meta = serde_json::json!({
        "config": model.config,
        "preprocess": state,
    });
    let names = model.param_names();
    let params = model.params();
    let table: Vec<(String, &Tensor<T>)> = names.into_iter().zip(params).collect();
    write_container(dir, meta, &table)
}

pub fn load_autoencoder<T: Scalar>(dir: &Path) -> Result<(Autoencoder<T>, PreprocessState)> {
    let (meta, tensors) = read_container::<T>(dir)?;
    let config: AutoencoderConfig = serde_json::from_value(
        meta.get("config")
            .ok_or_else(|| Error::Format("autoencoder manifest missing config".into()))?
            .clone(),
    )?;
    let state: PreprocessState = serde_json::from_value(
        meta.get("preprocess")
            .ok_or_else(|| Error::Format("autoencoder manifest missing preprocess".into()))?
            .clone(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Autoencoder::init(&config, &mut rng)?;
    let by_name: std::collections::BTreeMap<String, Tensor<T>> = tensors.into_iter().collect();
    let names = model.param_names();
    for (name, param) in names.iter().zip(model.params_mut()) {
        let loaded = by_name
            .get(name)
            .ok_or_else(|| Error::Format(format!("autoencoder missing tensor {name}")))?;
        if loaded.shape() != param.shape() {
            return Err(Error::Format(format!(
                "tensor {name}: stored shape {:?} != expected {:?}",
                loaded.shape(),
                param.shape()
            )));
        }
        *param = loaded.clone();
    }
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::align_zoo;
    use crate::zoo::{train_zoo, Architecture, InputShape, TaskSpec, TrainSettings};

    fn tiny_config(d_t: usize) -> AutoencoderConfig {
        AutoencoderConfig {
            d_model: 32,
            d_z: 8,
            d_proj: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ws: 8,
            ..AutoencoderConfig::desk_default(d_t)
        }
    }

    fn tiny_zoo(seed: u64) -> Zoo<f32> {
        let arch = Architecture::mlp(&[2, 8, 3]);
        let task = TaskSpec {
            generator: "gaussian-blobs".into(),
            classes: 3,
            input: InputShape::Flat(2),
            noise: 0.5,
            seed,
        };
        let settings = TrainSettings {
            epochs: 2,
            snapshot_epochs: vec![1, 2],
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
        };
        let zoo = train_zoo(&arch, &task, 12, 128, 64, &settings, seed).unwrap();
        let reference = zoo.split_ids(Split::Train)[0].clone();
        align_zoo(&zoo, &reference).unwrap()
    }

    fn tiny_model(seed: u64) -> (Autoencoder<f32>, TokenSequence<f32>) {
        let zoo = tiny_zoo(seed);
        let mut cfg = tiny_config(9);
        let seq = tokenize(&zoo.checkpoints[0], 9).unwrap();
        cfg.fit_capacities(&seq);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Autoencoder::init(&cfg, &mut rng).unwrap(), seq)
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = tiny_config(9);
        c.cap_n = 10;
        c.cap_l = 4;
        c.cap_k = 10;
        assert!(c.validate().is_ok());
        assert!(AutoencoderConfig { heads: 5, ..c.clone() }.validate().is_err());
        assert!(AutoencoderConfig { d_z: 0, ..c.clone() }.validate().is_err());
        assert!(AutoencoderConfig { d_z: 100, ..c.clone() }.validate().is_err());
        assert!(AutoencoderConfig { gamma: 1.5, ..c.clone() }.validate().is_err());
        assert!(AutoencoderConfig { tau: 0.0, ..c.clone() }.validate().is_err());
        assert!(AutoencoderConfig { cap_n: 0, ..c }.validate().is_err());
    }

    #[test]
    fn parameter_naming_is_unique_and_complete() {
        let (model, _) = tiny_model(1);
        let names = model.param_names();
        assert_eq!(names.len(), model.params().len());
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn encode_and_decode_shapes_for_all_window_lengths() {
        let (model, seq) = tiny_model(2);
        for len in [0usize, 1, 3, 8] {
            let w = slice_window(&seq, 0, len);
            let z = model.encode_window(&w.tokens, &w.positions).unwrap();
            assert_eq!(z.shape(), &[len, model.config.d_z]);
            let t = model.decode_window(&z, &w.positions).unwrap();
            assert_eq!(t.shape(), &[len, model.config.d_t]);
        }
    }

    #[test]
    fn windows_do_not_mix_in_a_batch() {
        let (model, seq) = tiny_model(3);
        let a = slice_window(&seq, 0, 6);
        let b = slice_window(&seq, 5, 6);
        let solo_a = model.encode_window(&a.tokens, &a.positions).unwrap();
        let solo_b = model.encode_window(&b.tokens, &b.positions).unwrap();
        // batch both windows through the graph directly
        let mut g = Graph::new();
        let vars = leaf_autoencoder(&mut g, &model, false);
        let mut cat = Tensor::zeros(&[12, model.config.d_t]);
        for i in 0..6 {
            cat.row_mut(i).copy_from_slice(a.tokens.row(i));
            cat.row_mut(6 + i).copy_from_slice(b.tokens.row(i));
        }
        let mut positions = a.positions.clone();
        positions.extend(&b.positions);
        let tv = g.constant(cat);
        let z = encode_graph(&mut g, &vars, &model.config, tv, &positions, &[6, 6]).unwrap();
        let zv = g.value(z);
        for i in 0..6 {
            for j in 0..model.config.d_z {
                assert!((zv.get2(i, j) - solo_a.get2(i, j)).abs() < 1e-5);
                assert!((zv.get2(6 + i, j) - solo_b.get2(i, j)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn position_overflow_is_a_capacity_error() {
        let (model, seq) = tiny_model(4);
        let mut w = slice_window(&seq, 0, 2);
        w.positions[1][0] = model.config.cap_n + 1;
        assert!(matches!(
            model.encode_window(&w.tokens, &w.positions),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn noise_augmentation_boundaries() {
        let (_, seq) = tiny_model(5);
        let w = slice_window(&seq, 0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same = augment_noise(&w.tokens, &w.mask, 0.0, &mut rng);
        assert_eq!(same, w.tokens);
        let noisy = augment_noise(&w.tokens, &w.mask, 0.5, &mut rng);
        for ((&a, &b), &m) in noisy
            .data()
            .iter()
            .zip(w.tokens.data())
            .zip(w.mask.data())
        {
            if m == 0.0 {
                assert_eq!(a, b, "noise leaked into padding");
            }
        }
    }

    #[test]
    fn permuted_view_is_functionally_equivalent() {
        use crate::tokenizer::detokenize;
        use crate::zoo::{forward_model, leaf_model};
        let zoo = tiny_zoo(6);
        let ckpt = &zoo.checkpoints[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let permuted_seq = augment_permute(ckpt, 9, &mut rng).unwrap();
        let permuted = detokenize(&permuted_seq, &ckpt.arch).unwrap();
        let mut xr = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[50, 2], 1.0, &mut xr);
        let logits = |m: &ModelCheckpoint<f32>| {
            let mut g = Graph::new();
            let vars = leaf_model(&mut g, m, false);
            let input = g.constant(x.clone());
            let (out, _) = forward_model(&mut g, &vars, m, input, false).unwrap();
            g.value(out).clone()
        };
        let a = logits(ckpt);
        let b = logits(&permuted);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn contrastive_hand_case() {
        // identity projection head, orthogonal unit latents: per-anchor loss
        // is −log(e/(e+2))
        let mut cfg = tiny_config(9);
        cfg.d_z = 2;
        cfg.d_proj = 2;
        cfg.cap_n = 4;
        cfg.cap_l = 4;
        cfg.cap_k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = Autoencoder::<f64>::init(&cfg, &mut rng).unwrap();
        model.proj1_w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        model.proj1_b = Tensor::zeros(&[1, 2]);
        model.proj2_w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        model.proj2_b = Tensor::zeros(&[1, 2]);
        let e1 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let loss = loss_contrastive(&model, &[e1.clone(), e2.clone()], &[e1, e2], 1.0).unwrap();
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
        assert!((expected - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn contrastive_invariant_to_rotation_of_projections() {
        let (model, seq) = tiny_model(8);
        let zs: Vec<Tensor<f32>> = (0..4)
            .map(|i| {
                let w = slice_window(&seq, i * 2, 3);
                model.encode_window(&w.tokens, &w.positions).unwrap()
            })
            .collect();
        let (zi, zj) = (vec![zs[0].clone(), zs[1].clone()], vec![zs[2].clone(), zs[3].clone()]);
        let base = loss_contrastive(&model, &zi, &zj, 0.5).unwrap();
        // rotate the projection output: cosine similarities are unchanged
        let mut rotated = model.clone();
        let (s, c) = (0.6f32, 0.8f32);
        let d = model.config.d_proj;
        let mut rot = Tensor::<f32>::zeros(&[d, d]);
        for i in (0..d).step_by(2) {
            rot.set2(i, i, c);
            rot.set2(i, i + 1, -s);
            rot.set2(i + 1, i, s);
            rot.set2(i + 1, i + 1, c);
        }
        rotated.proj2_w = rot.matmul(&model.proj2_w).unwrap();
        rotated.proj2_b = {
            let b_col = model.proj2_b.reshape(&[d, 1]).unwrap();
            rot.matmul(&b_col).unwrap().reshape(&[1, d]).unwrap()
        };
        let after = loss_contrastive(&rotated, &zi, &zj, 0.5).unwrap();
        assert!((base - after).abs() < 1e-5, "{base} vs {after}");
    }

    #[test]
    fn contrastive_rejects_tiny_batches() {
        let (model, seq) = tiny_model(9);
        let w = slice_window(&seq, 0, 3);
        let z = model.encode_window(&w.tokens, &w.positions).unwrap();
        assert!(matches!(
            loss_contrastive(&model, &[z.clone()], &[z], 0.5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_gamma_matches_pure_reconstruction_gradients() {
        let (model, seq) = tiny_model(10);
        let mut cfg = model.config.clone();
        cfg.gamma = 0.0;
        let views: Vec<(TokenWindow<f32>, Tensor<f32>)> = (0..4)
            .map(|i| {
                let w = slice_window(&seq, i * 2, 4);
                let clean = w.tokens.clone();
                (w, clean)
            })
            .collect();
        let batch = assemble_batch(&views, cfg.d_t);
        let grads_for = |pure_recon: bool| -> Vec<Tensor<f32>> {
            let mut g = Graph::new();
            let vars = leaf_autoencoder(&mut g, &model, true);
            let input = g.constant(batch.input.clone());
            let target = g.constant(batch.target.clone());
            let mask = g.constant(batch.mask.clone());
            let z = encode_graph(&mut g, &vars, &cfg, input, &batch.positions, &batch.lens)
                .unwrap();
            let pred = decode_graph(&mut g, &vars, &cfg, z, &batch.positions, &batch.lens)
                .unwrap();
            let rec = g.mse_masked(pred, target, mask).unwrap();
            let loss = if pure_recon {
                rec
            } else {
                let con = contrastive_graph(&mut g, &vars, z, &batch.lens, cfg.tau).unwrap();
                let rw = g.scale(rec, 1.0 - cfg.gamma as f32);
                let cw = g.scale(con, cfg.gamma as f32);
                g.add(rw, cw).unwrap()
            };
            let grads = g.backward(loss).unwrap();
            // params off the loss path (e.g. the projection head under pure
            // reconstruction) get no gradient; treat that as zeros
            vars.flat
                .iter()
                .map(|v| {
                    grads[v.index()].clone().unwrap_or_else(|| {
                        Tensor::zeros(g.value(*v).shape())
                    })
                })
                .collect()
        };
        let a = grads_for(true);
        let b = grads_for(false);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    fn short_pretrain(epochs: usize, seed: u64) -> (Zoo<f32>, PretrainOutput<f32>) {
        let zoo = tiny_zoo(seed);
        let mut cfg = tiny_config(9);
        cfg.epochs = epochs;
        cfg.patience = epochs;
        cfg.batch_size = 8;
        cfg.lr_max = 3e-3;
        cfg.seed = seed;
        let out = pretrain(&zoo, &cfg).unwrap();
        (zoo, out)
    }

    #[test]
    fn pretraining_learns_to_reconstruct() {
        let (zoo, out) = short_pretrain(80, 11);
        // compare against an untrained model on a held-out (val) sequence
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let untrained = Autoencoder::init(&out.model.config, &mut rng).unwrap();
        let val_id = &zoo.split_ids(Split::Val)[0];
        let epochs = zoo.snapshot_epochs();
        let ckpt = zoo.checkpoint(val_id, *epochs.last().unwrap()).unwrap();
        let seq = tokenize(&standardize(ckpt, &out.state).unwrap(), 9).unwrap();
        let masked_err = |m: &Autoencoder<f32>| -> f64 {
            let mut total = 0.0;
            let mut start = 0;
            while start < seq.len() {
                let len = m.config.ws.min(seq.len() - start);
                let w = slice_window(&seq, start, len);
                let z = m.encode_window(&w.tokens, &w.positions).unwrap();
                let t = m.decode_window(&z, &w.positions).unwrap();
                total += loss_reconstruction(&t, &w.tokens, &w.mask).unwrap() as f64;
                start += len;
            }
            total
        };
        let trained_err = masked_err(&out.model);
        let untrained_err = masked_err(&untrained);
        assert!(
            trained_err * 4.0 <= untrained_err,
            "trained {trained_err} vs untrained {untrained_err}"
        );
        // training made progress on validation reconstruction as well
        let first = out.log.first().unwrap().val_rec;
        let best = out.log.iter().map(|e| e.val_rec).fold(f64::INFINITY, f64::min);
        assert!(best < first, "val_rec never improved: {first} -> {best}");
    }

    #[test]
    fn trained_encoder_is_position_sensitive() {
        let (_, out) = short_pretrain(10, 12);
        let model = &out.model;
        let tokens = Tensor::<f32>::filled(&[1, 9], 0.3);
        let a = model.encode_window(&tokens, &[[1, 1, 1]]).unwrap();
        let b = model.encode_window(&tokens, &[[7, 1, 7]]).unwrap();
        let diff: f32 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-4, "identical latents for different positions");
    }

    #[test]
    fn pretraining_is_reproducible() {
        let (_, a) = short_pretrain(3, 13);
        let (_, b) = short_pretrain(3, 13);
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.val_rec, y.val_rec);
            assert_eq!(x.train_rec, y.train_rec);
        }
        for (p, q) in a.model.params().into_iter().zip(b.model.params()) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn nan_in_zoo_aborts_with_numeric_error() {
        let mut zoo = tiny_zoo(14);
        let w = &mut zoo.checkpoints[0].layers[0].weight;
        w.data_mut()[0] = f32::NAN;
        let mut cfg = tiny_config(9);
        cfg.epochs = 2;
        assert!(matches!(pretrain(&zoo, &cfg), Err(Error::Numeric(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let (_, out) = short_pretrain(2, 15);
        let dir = tempfile::tempdir().unwrap();
        save_autoencoder(dir.path(), &out.model, &out.state).unwrap();
        let (back, state) = load_autoencoder::<f32>(dir.path()).unwrap();
        assert_eq!(state, out.state);
        for (a, b) in out.model.params().into_iter().zip(back.params()) {
            assert_eq!(a, b);
        }
        assert_eq!(back.config, out.model.config);
    }

    #[test]
    fn training_log_csv_has_header_and_rows() {
        let (_, out) = short_pretrain(2, 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_training_log(&path, &out.log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,lr,train_rec,train_con,val_rec,val_con"
        );
        assert_eq!(lines.count(), out.log.len());
    }
}
