//! Spectral weight diagnostics and linear probing.
//!
//! Spectral side: empirical spectral densities (eigenvalues of WᵀW), log
//! spectral norms, and power-law tail fits (Hill estimator with
//! Kolmogorov–Smirnov x_min selection), the classic heavy-tail diagnostics
//! for trained weight matrices. Probing side: ridge regression from model
//! features (latent means, raw weights, or per-layer weight statistics) to
//! model properties such as test accuracy, with train/test splits kept
//! disjoint by model id.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::zoo::ModelCheckpoint;

/// Minimum tail size for a power-law fit.
const MIN_TAIL: usize = 10;
/// Ridge regularization for linear probes.
pub const PROBE_RIDGE_LAMBDA: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Spectral diagnostics
// ---------------------------------------------------------------------------

/// Eigenvalues of WᵀW (equivalently the squared singular values of W),
/// descending, clamped into [0, ∞).
///
/// Computed as the eigendecomposition of the Gram matrix of the smaller
/// side, so cost is O(min(r,c)³) regardless of orientation.
pub fn esd<T: Scalar>(w: &Tensor<T>) -> Result<Vec<f64>> {
    let (r, c) = w.dims2()?;
    if r == 0 || c == 0 {
        return Err(Error::Argument("empty matrix has no spectrum".into()));
    }
    let (n, gram) = if r <= c {
        // W·Wᵀ
        let mut g = vec![0.0f64; r * r];
        for i in 0..r {
            for j in i..r {
                let dot: f64 = w
                    .row(i)
                    .iter()
                    .zip(w.row(j))
                    .map(|(&a, &b)| a.as_f64() * b.as_f64())
                    .sum();
                g[i * r + j] = dot;
                g[j * r + i] = dot;
            }
        }
        (r, g)
    } else {
        // Wᵀ·W
        let mut g = vec![0.0f64; c * c];
        for i in 0..r {
            let row = w.row(i);
            for a in 0..c {
                let va = row[a].as_f64();
                for b in a..c {
                    g[a * c + b] += va * row[b].as_f64();
                }
            }
        }
        for a in 0..c {
            for b in 0..a {
                g[a * c + b] = g[b * c + a];
            }
        }
        (c, g)
    };
    let mut eigs = jacobi_eigenvalues(n, gram);
    for e in &mut eigs {
        if *e < 0.0 {
            debug_assert!(*e > -1e-8, "eigenvalue {e} below numerical floor");
            *e = 0.0;
        }
    }
    eigs.sort_by(|a, b| b.total_cmp(a));
    Ok(eigs)
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix (row-major).
fn jacobi_eigenvalues(n: usize, mut a: Vec<f64>) -> Vec<f64> {
    if n == 1 {
        return a;
    }
    let at = |a: &[f64], i: usize, j: usize| a[i * n + j];
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| at(&a, i, j).powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = at(&a, p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = at(&a, p, p);
                let aqq = at(&a, q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = at(&a, k, p);
                    let akq = at(&a, k, q);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = at(&a, p, k);
                    let aqk = at(&a, q, k);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| at(&a, i, i)).collect()
}

/// log10 of the largest ESD eigenvalue (the squared spectral norm).
pub fn log_spectral_norm<T: Scalar>(w: &Tensor<T>) -> Result<f64> {
    let eigs = esd(w)?;
    let lambda_max = eigs[0];
    if lambda_max <= 0.0 {
        return Err(Error::Numeric(
            "zero matrix has no finite log spectral norm".into(),
        ));
    }
    Ok(lambda_max.log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub x_min: f64,
    /// Kolmogorov–Smirnov distance of the selected fit.
    pub ks: f64,
    /// Number of tail samples used.
    pub tail: usize,
}

/// Continuous power-law tail fit: for each candidate x_min (every sample
/// with at least [`MIN_TAIL`] points above it), compute the Hill estimate
/// α = 1 + n / Σ ln(xᵢ/x_min) and keep the x_min with smallest KS distance
/// between the empirical tail and the fitted CDF.
///
/// Returns `None` (fit failure, not an error) when too few positive samples
/// exist.
pub fn power_law_alpha(samples: &[f64]) -> Option<PowerLawFit> {
    let mut xs: Vec<f64> = samples.iter().copied().filter(|&x| x > 0.0).collect();
    if xs.len() < MIN_TAIL {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let mut best: Option<PowerLawFit> = None;
    for start in 0..=xs.len() - MIN_TAIL {
        let x_min = xs[start];
        if start > 0 && x_min == xs[start - 1] {
            continue; // same candidate as previous index
        }
        let tail = &xs[start..];
        let n = tail.len();
        let log_sum: f64 = tail.iter().map(|&x| (x / x_min).ln()).sum();
        if log_sum <= 0.0 {
            continue; // degenerate: all tail values equal x_min
        }
        let alpha = 1.0 + n as f64 / log_sum;
        // KS distance between empirical and fitted tail CDFs
        let mut ks = 0.0f64;
        for (i, &x) in tail.iter().enumerate() {
            let fitted = 1.0 - (x / x_min).powf(1.0 - alpha);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((fitted - lo).abs()).max((fitted - hi).abs());
        }
        if best.is_none_or(|b| ks < b.ks) {
            best = Some(PowerLawFit {
                alpha,
                x_min,
                ks,
                tail: n,
            });
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpectral {
    /// 1-based layer index.
    pub layer: usize,
    pub lambda_max: f64,
    pub log_spectral_norm: f64,
    /// `None` when the power-law fit failed (tail too short).
    pub alpha: Option<f64>,
    pub x_min: Option<f64>,
    /// α·log10(λ_max) when both parts exist.
    pub weighted_alpha: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralReport {
    pub model_id: String,
    pub epoch: usize,
    pub layers: Vec<LayerSpectral>,
    pub mean_log_spectral_norm: f64,
    pub mean_alpha: Option<f64>,
    pub mean_weighted_alpha: Option<f64>,
}

/// Spectral diagnostics for every layer of a checkpoint. Layers whose
/// weights are all zero are skipped (no finite log norm).
pub fn spectral_report<T: Scalar>(m: &ModelCheckpoint<T>) -> Result<SpectralReport> {
    let mut layers = Vec::new();
    for (i, lt) in m.layers.iter().enumerate() {
        let eigs = esd(&lt.weight)?;
        if eigs[0] <= 0.0 {
            continue;
        }
        let fit = power_law_alpha(&eigs);
        let lsn = eigs[0].log10();
        layers.push(LayerSpectral {
            layer: i + 1,
            lambda_max: eigs[0],
            log_spectral_norm: lsn,
            alpha: fit.map(|f| f.alpha),
            x_min: fit.map(|f| f.x_min),
            weighted_alpha: fit.map(|f| f.alpha * lsn),
        });
    }
    if layers.is_empty() {
        return Err(Error::Data(format!(
            "model {} has no layer with a nonzero spectrum",
            m.meta.model_id
        )));
    }
    let mean = |xs: Vec<f64>| -> Option<f64> {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    let mean_lsn =
        layers.iter().map(|l| l.log_spectral_norm).sum::<f64>() / layers.len() as f64;
    let mean_alpha = mean(layers.iter().filter_map(|l| l.alpha).collect());
    let mean_wa = mean(layers.iter().filter_map(|l| l.weighted_alpha).collect());
    Ok(SpectralReport {
        model_id: m.meta.model_id.clone(),
        epoch: m.meta.epoch,
        layers,
        mean_log_spectral_norm: mean_lsn,
        mean_alpha,
        mean_weighted_alpha: mean_wa,
    })
}

// ---------------------------------------------------------------------------
// Weight statistics
// ---------------------------------------------------------------------------

/// Linear-interpolation percentile of a sorted slice, p in [0, 100].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per-layer weight statistics: mean, population std, and the five quintile
/// boundaries (0/25/50/75/100th percentiles) of weights and bias together;
/// 7 features per layer, concatenated in layer order.
pub fn weight_statistics<T: Scalar>(m: &ModelCheckpoint<T>) -> Vec<f64> {
    let mut features = Vec::with_capacity(7 * m.layers.len());
    for lt in &m.layers {
        let mut vals: Vec<f64> = lt.weight.data().iter().map(|v| v.as_f64()).collect();
        if let Some(b) = &lt.bias {
            vals.extend(b.data().iter().map(|v| v.as_f64()));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        vals.sort_by(f64::total_cmp);
        features.push(mean);
        features.push(var.sqrt());
        for p in [0.0, 25.0, 50.0, 75.0, 100.0] {
            features.push(percentile(&vals, p));
        }
    }
    features
}

// ---------------------------------------------------------------------------
// Linear probing
// ---------------------------------------------------------------------------

/// One probe observation: a feature vector for a model checkpoint plus the
/// regression target.
#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub model_id: String,
    pub features: Vec<f64>,
    pub target: f64,
    /// True for training rows, false for test rows.
    pub train: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: String,
    pub feature_source: String,
    pub lambda: f64,
    /// Fitted coefficients in standardized feature space, intercept last.
    pub coefficients: Vec<f64>,
    /// R² on the test rows; `None` when the test target is constant.
    pub r2: Option<f64>,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Solve A·x = b for symmetric positive-definite A (row-major) by Gaussian
/// elimination with partial pivoting.
fn solve_linear(n: usize, mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(Error::Numeric("singular system in ridge solve".into()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * x[k];
        }
        x[col] = acc / a[col * n + col];
    }
    Ok(x)
}

/// Ridge-regression probe: features are standardized with train-split
/// statistics, a linear model with intercept is fit on the train rows
/// (λ = [`PROBE_RIDGE_LAMBDA`], intercept unregularized via target
/// centering), and R² is reported on the test rows only.
///
/// Train and test rows must not share model ids; overlap is a data error.
pub fn linear_probe(
    rows: &[ProbeRow],
    target_name: &str,
    feature_source: &str,
) -> Result<ProbeReport> {
    let train: Vec<&ProbeRow> = rows.iter().filter(|r| r.train).collect();
    let test: Vec<&ProbeRow> = rows.iter().filter(|r| !r.train).collect();
    if train.len() < 10 {
        return Err(Error::Argument(format!(
            "probe needs at least 10 train rows, got {}",
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::Argument("probe needs test rows".into()));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|r| r.model_id.as_str()).collect();
    if let Some(leak) = test.iter().find(|r| train_ids.contains(r.model_id.as_str())) {
        return Err(Error::Data(format!(
            "model {} appears in both probe splits",
            leak.model_id
        )));
    }
    let d = train[0].features.len();
    if rows.iter().any(|r| r.features.len() != d) {
        return Err(Error::Dimension("probe feature lengths differ".into()));
    }

    // standardize features on the train split
    let nt = train.len() as f64;
    let mut f_mean = vec![0.0; d];
    let mut f_std = vec![0.0; d];
    for r in &train {
        for (m, &v) in f_mean.iter_mut().zip(&r.features) {
            *m += v;
        }
    }
    for m in &mut f_mean {
        *m /= nt;
    }
    for r in &train {
        for ((s, &m), &v) in f_std.iter_mut().zip(&f_mean).zip(&r.features) {
            *s += (v - m).powi(2);
        }
    }
    for s in &mut f_std {
        *s = (*s / nt).sqrt().max(1e-12);
    }
    let standardized = |r: &ProbeRow| -> Vec<f64> {
        r.features
            .iter()
            .zip(&f_mean)
            .zip(&f_std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect()
    };

    // ridge on centered target: w = (XᵀX + λI)⁻¹ Xᵀ(y − ȳ)
    let y_mean: f64 = train.iter().map(|r| r.target).sum::<f64>() / nt;
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d];
    for r in &train {
        let x = standardized(r);
        let yc = r.target - y_mean;
        for i in 0..d {
            xty[i] += x[i] * yc;
            for j in i..d {
                xtx[i * d + j] += x[i] * x[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            xtx[i * d + j] = xtx[j * d + i];
        }
        xtx[i * d + i] += PROBE_RIDGE_LAMBDA;
    }
    let w = solve_linear(d, xtx, xty)?;

    // test R²
    let test_mean: f64 = test.iter().map(|r| r.target).sum::<f64>() / test.len() as f64;
    let ss_tot: f64 = test.iter().map(|r| (r.target - test_mean).powi(2)).sum();
    let r2 = if ss_tot <= 0.0 {
        None // constant target: R² undefined
    } else {
        let ss_res: f64 = test
            .iter()
            .map(|r| {
                let x = standardized(r);
                let pred =
                    y_mean + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                (r.target - pred).powi(2)
            })
            .sum();
        Some(1.0 - ss_res / ss_tot)
    };
    let mut coefficients = w;
    coefficients.push(y_mean);
    Ok(ProbeReport {
        target: target_name.to_string(),
        feature_source: feature_source.to_string(),
        lambda: PROBE_RIDGE_LAMBDA,
        coefficients,
        r2,
        train_rows: train.len(),
        test_rows: test.len(),
    })
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

pub fn write_spectral_csv(path: &Path, reports: &[SpectralReport]) -> Result<()> {
    let mut out =
        String::from("model_id,epoch,layer,lambda_max,log_spectral_norm,alpha,x_min,weighted_alpha\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in reports {
        for l in &r.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.model_id,
                r.epoch,
                l.layer,
                l.lambda_max,
                l.log_spectral_norm,
                opt(l.alpha),
                opt(l.x_min),
                opt(l.weighted_alpha)
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_probe_json(path: &Path, reports: &[ProbeReport]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

/// Minimal scatter plot as a standalone SVG file.
pub fn write_scatter_svg(
    path: &Path,
    points: &[(f64, f64)],
    x_label: &str,
    y_label: &str,
    title: &str,
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Argument("cannot plot zero points".into()));
    }
    let (w, h, margin) = (480.0, 360.0, 48.0);
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\" \
         transform=\"rotate(-90 14 {})\">{y_label}</text>\n\
         <line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{margin}\" y1=\"{margin}\" x2=\"{margin}\" y2=\"{}\" stroke=\"black\"/>\n",
        w / 2.0,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0,
        h - margin,
        w - margin,
        h - margin,
        h - margin,
    );
    for &(x, y) in points {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.7\"/>\n",
            sx(x),
            sy(y)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
