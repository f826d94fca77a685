//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations during the forward pass; [`Graph::backward`]
//! replays the tape in reverse, accumulating gradients into per-node buffers.
//! Nodes hold their forward value plus a boxed backward closure that maps the
//! incoming gradient to per-parent gradient contributions. Constants
//! (`needs_grad == false`) prune backward traversal early.
//!
//! The graph is rebuilt every training step and dropped afterwards;
//! parameters live outside the graph as plain [`Tensor`]s.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Index into the gradient vector returned by [`Graph::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Patch-extraction geometry for [`Graph::im2col`] (NHWC input, valid padding).
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackFn<T>>,
    ) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            needs_grad: requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        dfa: impl Fn(T, T) -> T + 'static,
        dfb: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let mut out = Tensor::zeros(&out_shape);
        {
            let bn = bv.numel();
            let an = av.numel();
            let (ad, bd, od) = (av.data(), bv.data(), out.data_mut());
            for (i, o) in od.iter_mut().enumerate() {
                *o = f(ad[i % an], bd[i % bn]);
            }
        }
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let av = parents[0];
            let bv = parents[1];
            let an = av.numel();
            let bn = bv.numel();
            let mut ga = Tensor::zeros(av.shape());
            let mut gb = Tensor::zeros(bv.shape());
            let (gd, ad, bd) = (grad.data(), av.data(), bv.data());
            let gad = ga.data_mut();
            for (i, &g) in gd.iter().enumerate() {
                gad[i % an] = gad[i % an] + g * dfa(ad[i % an], bd[i % bn]);
            }
            let gbd = gb.data_mut();
            for (i, &g) in gd.iter().enumerate() {
                gbd[i % bn] = gbd[i % bn] + g * dfb(ad[i % an], bd[i % bn]);
            }
            vec![Some(ga), Some(gb)]
        });
        Ok(self.push(out, vec![a.0, b.0], Some(back)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * c);
        let back: BackFn<T> = Box::new(move |grad, _| vec![Some(grad.map(|g| g * c))]);
        self.push(out, vec![a.0], Some(back))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let back: BackFn<T> = Box::new(|grad, parents| {
            let g = grad
                .zip(parents[0], |g, x| if x > T::zero() { g } else { T::zero() })
                .expect("relu backward shape");
            vec![Some(g)]
        });
        self.push(out, vec![a.0], Some(back))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(gelu_fwd);
        let back: BackFn<T> = Box::new(|grad, parents| {
            let g = grad
                .zip(parents[0], |g, x| g * gelu_grad(x))
                .expect("gelu backward shape");
            vec![Some(g)]
        });
        self.push(out, vec![a.0], Some(back))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let back: BackFn<T> = Box::new(|grad, parents| {
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            let (m, n) = grad.dims2().unwrap();
            let (_, k) = parents[0].dims2().unwrap();
            let mut ga = Tensor::zeros(&[m, k]);
            matmul_nt(grad.data(), parents[1].data(), ga.data_mut(), m, n, k);
            let mut gb = Tensor::zeros(&[k, n]);
            matmul_tn(parents[0].data(), grad.data(), gb.data_mut(), k, m, n);
            vec![Some(ga), Some(gb)]
        });
        Ok(self.push(out, vec![a.0, b.0], Some(back)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.transpose2()?;
        let back: BackFn<T> =
            Box::new(|grad, _| vec![Some(grad.transpose2().expect("transpose backward"))]);
        Ok(self.push(out, vec![a.0], Some(back)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.reshape(shape)?;
        let back: BackFn<T> = Box::new(|grad, parents| {
            vec![Some(grad.reshape(parents[0].shape()).expect("reshape backward"))]
        });
        Ok(self.push(out, vec![a.0], Some(back)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        if end > c || start >= end {
            return Err(Error::Dimension(format!(
                "column slice {start}..{end} out of range for {c} columns"
            )));
        }
        let src = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(&[r, end - start]);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..end]);
        }
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let mut g = Tensor::zeros(parents[0].shape());
            let (r, _) = grad.dims2().unwrap();
            for i in 0..r {
                g.row_mut(i)[start..end].copy_from_slice(grad.row(i));
            }
            vec![Some(g)]
        });
        Ok(self.push(out, vec![a.0], Some(back)))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Argument("concat_cols of zero tensors".into()));
        }
        let r = self.nodes[vars[0].0].value.dims2()?.0;
        let mut widths = Vec::with_capacity(vars.len());
        for v in vars {
            let (ri, ci) = self.nodes[v.0].value.dims2()?;
            if ri != r {
                return Err(Error::Dimension("concat_cols row mismatch".into()));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[r, total]);
        for i in 0..r {
            let mut off = 0;
            for (v, &w) in vars.iter().zip(&widths) {
                out.row_mut(i)[off..off + w].copy_from_slice(self.nodes[v.0].value.row(i));
                off += w;
            }
        }
        let widths_b = widths.clone();
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let r = grad.dims2().unwrap().0;
            let mut grads: Vec<Tensor<T>> = parents.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for i in 0..r {
                let mut off = 0;
                for (g, &w) in grads.iter_mut().zip(&widths_b) {
                    g.row_mut(i).copy_from_slice(&grad.row(i)[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        });
        Ok(self.push(out, vars.iter().map(|v| v.0).collect(), Some(back)))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Argument("concat_rows of zero tensors".into()));
        }
        let c = self.nodes[vars[0].0].value.dims2()?.1;
        let mut rows = Vec::with_capacity(vars.len());
        let mut data = Vec::new();
        for v in vars {
            let (ri, ci) = self.nodes[v.0].value.dims2()?;
            if ci != c {
                return Err(Error::Dimension("concat_rows column mismatch".into()));
            }
            rows.push(ri);
            data.extend_from_slice(self.nodes[v.0].value.data());
        }
        let total: usize = rows.iter().sum();
        let out = Tensor::new(vec![total, c], data)?;
        let rows_b = rows.clone();
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let c = grad.dims2().unwrap().1;
            let mut grads = Vec::with_capacity(parents.len());
            let mut off = 0;
            for (&ri, p) in rows_b.iter().zip(parents) {
                let slice = &grad.data()[off * c..(off + ri) * c];
                grads.push(Some(
                    Tensor::new(p.shape().to_vec(), slice.to_vec()).expect("concat_rows backward"),
                ));
                off += ri;
            }
            grads
        });
        Ok(self.push(out, vars.iter().map(|v| v.0).collect(), Some(back)))
    }

    /// Gather rows of `table` at `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.nodes[table.0].value.dims2()?;
        for &i in indices {
            if i >= rows {
                return Err(Error::Capacity(format!(
                    "index {i} exceeds table capacity {rows}"
                )));
            }
        }
        let src = &self.nodes[table.0].value;
        let mut out = Tensor::zeros(&[indices.len(), cols]);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        let idx = indices.to_vec();
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let mut g = Tensor::zeros(parents[0].shape());
            for (r, &i) in idx.iter().enumerate() {
                let grow = grad.row(r).to_vec();
                for (dst, s) in g.row_mut(i).iter_mut().zip(grow) {
                    *dst = *dst + s;
                }
            }
            vec![Some(g)]
        });
        Ok(self.push(out, vec![table.0], Some(back)))
    }

    // ---- normalization & reductions ---------------------------------------

    /// Softmax along `axis` (0 = down columns, 1 = along rows) of a 2-D tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::Argument(format!("softmax axis {axis} out of range")));
        }
        let x = if axis == 1 {
            self.nodes[a.0].value.clone()
        } else {
            self.nodes[a.0].value.transpose2()?
        };
        let y = softmax_rows(&x);
        let out = if axis == 1 { y } else { y.transpose2()? };
        let back: BackFn<T> = Box::new(move |grad, parents| {
            // dX_i = y_i ⊙ (g_i − <g_i, y_i>), recomputing y from the input
            let x = if axis == 1 {
                parents[0].clone()
            } else {
                parents[0].transpose2().unwrap()
            };
            let g = if axis == 1 {
                grad.clone()
            } else {
                grad.transpose2().unwrap()
            };
            let y = softmax_rows(&x);
            let (r, c) = y.dims2().unwrap();
            let mut gx = Tensor::zeros(&[r, c]);
            for i in 0..r {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            let gx = if axis == 1 { gx } else { gx.transpose2().unwrap() };
            vec![Some(gx)]
        });
        Ok(self.push(out, vec![a.0], Some(back)))
    }

    /// Per-row layer normalization with affine gain/bias (shape `[1, d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Argument("layer_norm eps must be positive".into()));
        }
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dims2()?;
        if self.nodes[gain.0].value.numel() != c || self.nodes[bias.0].value.numel() != c {
            return Err(Error::Dimension("layer_norm affine width mismatch".into()));
        }
        let gd = self.nodes[gain.0].value.data().to_vec();
        let bd = self.nodes[bias.0].value.data().to_vec();
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = xv.row(i);
            let (xhat, _, _) = normalize_row(row, eps);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = xhat[j] * gd[j] + bd[j];
            }
        }
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let xv = parents[0];
            let gainv = parents[1];
            let (r, c) = xv.dims2().unwrap();
            let cn = T::from_usize(c);
            let mut gx = Tensor::zeros(&[r, c]);
            let mut ggain = Tensor::zeros(parents[1].shape());
            let mut gbias = Tensor::zeros(parents[2].shape());
            for i in 0..r {
                let row = xv.row(i);
                let (xhat, _, inv_std) = normalize_row(row, eps);
                let grow = grad.row(i);
                // dL/dxhat_j = g_j * gain_j
                let dxhat: Vec<T> = grow
                    .iter()
                    .zip(gainv.data())
                    .map(|(&g, &gn)| g * gn)
                    .collect();
                let sum_dxhat: T = dxhat.iter().copied().sum();
                let sum_dxhat_xhat: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    let term = dxhat[j] - sum_dxhat / cn - xhat[j] * sum_dxhat_xhat / cn;
                    gx.row_mut(i)[j] = term * inv_std;
                }
                for j in 0..c {
                    ggain.data_mut()[j] = ggain.data_mut()[j] + grow[j] * xhat[j];
                    gbias.data_mut()[j] = gbias.data_mut()[j] + grow[j];
                }
            }
            vec![Some(gx), Some(ggain), Some(gbias)]
        });
        Ok(self.push(out, vec![x.0, gain.0, bias.0], Some(back)))
    }

    /// Column-wise batch normalization over a 2-D tensor (rows = samples).
    /// Returns the normalized output plus the batch mean/var used, so the
    /// caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dims2()?;
        if r < 2 {
            return Err(Error::Argument("batch_norm needs at least 2 rows".into()));
        }
        let rn = T::from_usize(r);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..r {
            for (m, &v) in mean.iter_mut().zip(xv.row(i)) {
                *m = *m + v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m / rn;
        }
        for i in 0..r {
            for j in 0..c {
                let d = xv.get2(i, j) - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        for v in var.iter_mut() {
            *v = *v / rn;
        }
        let gd = self.nodes[gain.0].value.data().to_vec();
        let bd = self.nodes[bias.0].value.data().to_vec();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for j in 0..c {
                let xhat = (xv.get2(i, j) - mean[j]) * inv_std[j];
                out.set2(i, j, xhat * gd[j] + bd[j]);
            }
        }
        let mean_b = mean.clone();
        let inv_std_b = inv_std.clone();
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let xv = parents[0];
            let gainv = parents[1];
            let (r, c) = xv.dims2().unwrap();
            let rn = T::from_usize(r);
            let mut gx = Tensor::zeros(&[r, c]);
            let mut ggain = Tensor::zeros(parents[1].shape());
            let mut gbias = Tensor::zeros(parents[2].shape());
            for j in 0..c {
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for i in 0..r {
                    let xhat = (xv.get2(i, j) - mean_b[j]) * inv_std_b[j];
                    let dxhat = grad.get2(i, j) * gainv.data()[j];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    ggain.data_mut()[j] = ggain.data_mut()[j] + grad.get2(i, j) * xhat;
                    gbias.data_mut()[j] = gbias.data_mut()[j] + grad.get2(i, j);
                }
                for i in 0..r {
                    let xhat = (xv.get2(i, j) - mean_b[j]) * inv_std_b[j];
                    let dxhat = grad.get2(i, j) * gainv.data()[j];
                    let v = (dxhat - sum_dxhat / rn - xhat * sum_dxhat_xhat / rn) * inv_std_b[j];
                    gx.set2(i, j, v);
                }
            }
            vec![Some(gx), Some(ggain), Some(gbias)]
        });
        let v = self.push(out, vec![x.0, gain.0, bias.0], Some(back));
        Ok((v, mean, var))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        if r == 0 {
            return Err(Error::Argument("mean_rows of empty tensor".into()));
        }
        let rn = T::from_usize(r);
        let xv = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(&[1, c]);
        for i in 0..r {
            for (o, &v) in out.data_mut().iter_mut().zip(xv.row(i)) {
                *o = *o + v;
            }
        }
        for o in out.data_mut() {
            *o = *o / rn;
        }
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let (r, c) = parents[0].dims2().unwrap();
            let mut g = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for (o, &gv) in g.row_mut(i).iter_mut().zip(grad.data()) {
                    *o = gv / rn;
                }
            }
            vec![Some(g)]
        });
        Ok(self.push(out, vec![a.0], Some(back)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        let back: BackFn<T> = Box::new(|grad, parents| {
            let g = grad.item();
            vec![Some(parents[0].map(|_| g))]
        });
        self.push(Tensor::scalar(s), vec![a.0], Some(back))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize(n))
    }

    /// Masked mean-squared error: `sum(mask ⊙ (pred − target)²) / sum(mask)`.
    /// Returns 0 for an all-zero mask.
    pub fn mse_masked(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let pv = &self.nodes[pred.0].value;
        let tv = &self.nodes[target.0].value;
        let mv = &self.nodes[mask.0].value;
        if pv.shape() != tv.shape() || pv.shape() != mv.shape() {
            return Err(Error::Dimension(format!(
                "mse_masked shapes differ: {:?}, {:?}, {:?}",
                pv.shape(),
                tv.shape(),
                mv.shape()
            )));
        }
        let msum: T = mv.data().iter().copied().sum();
        let loss = if msum == T::zero() {
            T::zero()
        } else {
            let se: T = pv
                .data()
                .iter()
                .zip(tv.data())
                .zip(mv.data())
                .map(|((&p, &t), &m)| {
                    let d = p - t;
                    m * d * d
                })
                .sum();
            se / msum
        };
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let g = grad.item();
            let (pv, tv, mv) = (parents[0], parents[1], parents[2]);
            let msum: T = mv.data().iter().copied().sum();
            if msum == T::zero() {
                return vec![Some(Tensor::zeros(pv.shape())), None, None];
            }
            let two = T::from_f64(2.0);
            let mut gp = Tensor::zeros(pv.shape());
            for (((o, &p), &t), &m) in gp
                .data_mut()
                .iter_mut()
                .zip(pv.data())
                .zip(tv.data())
                .zip(mv.data())
            {
                *o = g * two * m * (p - t) / msum;
            }
            vec![Some(gp), None, None]
        });
        Ok(self.push(Tensor::scalar(loss), vec![pred.0, target.0, mask.0], Some(back)))
    }

    /// Row-wise L2 normalization (floor 1e-12 on the norm).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let xv = &self.nodes[a.0].value;
        let (r, c) = xv.dims2()?;
        let floor = T::from_f64(1e-12);
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = xv.row(i);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let xv = parents[0];
            let (r, c) = xv.dims2().unwrap();
            let mut gx = Tensor::zeros(&[r, c]);
            for i in 0..r {
                let row = xv.row(i);
                let grow = grad.row(i);
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
                let dot: T = row.iter().zip(grow).map(|(&x, &g)| x * g).sum();
                let n3 = norm * norm * norm;
                for j in 0..c {
                    gx.row_mut(i)[j] = grow[j] / norm - row[j] * dot / n3;
                }
            }
            vec![Some(gx)]
        });
        Ok(self.push(out, vec![a.0], Some(back)))
    }

    /// Mean cross-entropy of row logits against integer class labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xv = &self.nodes[logits.0].value;
        let (r, c) = xv.dims2()?;
        if labels.len() != r {
            return Err(Error::Dimension(format!(
                "{} labels for {} logit rows",
                labels.len(),
                r
            )));
        }
        for &l in labels {
            if l >= c {
                return Err(Error::Argument(format!("label {l} out of range {c}")));
            }
        }
        let probs = softmax_rows(xv);
        let rn = T::from_usize(r);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss = loss - probs.get2(i, l).max(T::from_f64(1e-30)).ln();
        }
        loss = loss / rn;
        let labels_b = labels.to_vec();
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let g = grad.item();
            let probs = softmax_rows(parents[0]);
            let (r, c) = probs.dims2().unwrap();
            let rn = T::from_usize(r);
            let mut gx = Tensor::zeros(&[r, c]);
            for (i, &l) in labels_b.iter().enumerate() {
                for j in 0..c {
                    let p = probs.get2(i, j);
                    let y = if j == l { T::one() } else { T::zero() };
                    gx.set2(i, j, g * (p - y) / rn);
                }
            }
            vec![Some(gx)]
        });
        Ok(self.push(Tensor::scalar(loss), vec![logits.0], Some(back)))
    }

    /// NT-Xent over a precomputed similarity matrix (`2B×2B`, already scaled
    /// by 1/τ). `positives[i]` is the index of the positive for anchor `i`;
    /// self-similarity is excluded from the denominator.
    pub fn ntxent_from_similarities(&mut self, sim: Var, positives: &[usize]) -> Result<Var> {
        let sv = &self.nodes[sim.0].value;
        let (r, c) = sv.dims2()?;
        if r != c || positives.len() != r {
            return Err(Error::Dimension("ntxent similarity matrix must be square with one positive per row".into()));
        }
        if r < 4 {
            return Err(Error::Argument("ntxent needs batch size >= 2 (4 views)".into()));
        }
        for (i, &p) in positives.iter().enumerate() {
            if p >= r || p == i {
                return Err(Error::Argument(format!("invalid positive index {p} for anchor {i}")));
            }
        }
        let rn = T::from_usize(r);
        let mut loss = T::zero();
        for (i, &p) in positives.iter().enumerate() {
            let row = sv.row(i);
            let mx = masked_max(row, i);
            let denom: T = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| (v - mx).exp())
                .sum();
            loss = loss - ((row[p] - mx).exp() / denom).ln();
        }
        loss = loss / rn;
        let pos = positives.to_vec();
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let g = grad.item();
            let sv = parents[0];
            let (r, _) = sv.dims2().unwrap();
            let rn = T::from_usize(r);
            let mut gx = Tensor::zeros(sv.shape());
            for (i, &p) in pos.iter().enumerate() {
                let row = sv.row(i);
                let mx = masked_max(row, i);
                let denom: T = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &v)| (v - mx).exp())
                    .sum();
                for j in 0..r {
                    if j == i {
                        continue;
                    }
                    let soft = (row[j] - mx).exp() / denom;
                    let y = if j == p { T::one() } else { T::zero() };
                    gx.set2(i, j, g * (soft - y) / rn);
                }
            }
            vec![Some(gx)]
        });
        Ok(self.push(Tensor::scalar(loss), vec![sim.0], Some(back)))
    }

    /// Extract convolution patches from an NHWC image batch. Input shape
    /// `[batch, height·width·channels]`; output `[batch·oh·ow, channels·k·k]`
    /// with patch entries in (channel, ky, kx) order to match row-wise
    /// weight tokenization.
    pub fn im2col(&mut self, x: Var, dims: ConvDims) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (b, f) = xv.dims2()?;
        if b != dims.batch || f != dims.height * dims.width * dims.channels {
            return Err(Error::Dimension(format!(
                "im2col input {:?} does not match dims {:?}",
                xv.shape(),
                dims
            )));
        }
        let (oh, ow) = (dims.out_height(), dims.out_width());
        let patch = dims.channels * dims.kernel * dims.kernel;
        let mut out = Tensor::zeros(&[b * oh * ow, patch]);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let orow = out.row_mut(bi * oh * ow + oy * ow + ox);
                    for ci in 0..dims.channels {
                        for ky in 0..dims.kernel {
                            for kx in 0..dims.kernel {
                                let iy = oy * dims.stride + ky;
                                let ix = ox * dims.stride + kx;
                                let src = bi * f + (iy * dims.width + ix) * dims.channels + ci;
                                orow[(ci * dims.kernel + ky) * dims.kernel + kx] = xv.data()[src];
                            }
                        }
                    }
                }
            }
        }
        let back: BackFn<T> = Box::new(move |grad, parents| {
            let mut g = Tensor::zeros(parents[0].shape());
            let (oh, ow) = (dims.out_height(), dims.out_width());
            let f = dims.height * dims.width * dims.channels;
            for bi in 0..dims.batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = grad.row(bi * oh * ow + oy * ow + ox).to_vec();
                        for ci in 0..dims.channels {
                            for ky in 0..dims.kernel {
                                for kx in 0..dims.kernel {
                                    let iy = oy * dims.stride + ky;
                                    let ix = ox * dims.stride + kx;
                                    let dst = bi * f + (iy * dims.width + ix) * dims.channels + ci;
                                    g.data_mut()[dst] = g.data_mut()[dst]
                                        + grow[(ci * dims.kernel + ky) * dims.kernel + kx];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(g)]
        });
        Ok(self.push(out, vec![x.0], Some(back)))
    }

    /// Reverse pass from a scalar output. Returns one gradient slot per node;
    /// only nodes on a `requires_grad` path are populated.
    pub fn backward(&self, v: Var) -> Result<Vec<Option<Tensor<T>>>> {
        if !self.nodes[v.0].value.is_scalar() {
            return Err(Error::Argument("backward requires a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[v.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=v.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(grad) = grads[i].clone() else { continue };
            let Some(back) = &node.backward else { continue };
            let pvals: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let contributions = back(&grad, &pvals);
            for (&p, contrib) in node.parents.iter().zip(contributions) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                if let Some(c) = contrib {
                    match &mut grads[p] {
                        Some(acc) => acc.add_scaled(&c, T::one()),
                        slot => *slot = Some(c),
                    }
                }
            }
            if node.backward.is_some() && !node.parents.is_empty() {
                // interior gradients are no longer needed once propagated
                grads[i] = None;
            }
        }
        Ok(grads)
    }
}

/// Leading-1 broadcasting only: after stripping leading 1s, the smaller
/// shape must be a suffix of the larger, so the smaller tensor tiles the
/// larger contiguously (indexing by `i % numel`).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let strip = |s: &[usize]| -> Vec<usize> {
        let start = s.iter().position(|&d| d != 1).unwrap_or(s.len());
        s[start..].to_vec()
    };
    let (sa, sb) = (strip(a), strip(b));
    if sa.len() >= sb.len() && sa.ends_with(&sb) {
        Ok(a.to_vec())
    } else if sb.ends_with(&sa) {
        Ok(b.to_vec())
    } else {
        Err(Error::Dimension(format!(
            "incompatible broadcast shapes {a:?} vs {b:?}"
        )))
    }
}

fn masked_max<T: Scalar>(row: &[T], skip: usize) -> T {
    let mut mx = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if j != skip && v > mx {
            mx = v;
        }
    }
    mx
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = x.dims2().expect("softmax_rows needs 2-D input");
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        let orow = out.row_mut(i);
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

fn normalize_row<T: Scalar>(row: &[T], eps: T) -> (Vec<T>, T, T) {
    let n = T::from_usize(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    let xhat = row.iter().map(|&v| (v - mean) * inv_std).collect();
    (xhat, mean, inv_std)
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences (h = 1e-5) against tape gradients, in f64.
    fn fd_check(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let h = 1e-5;
        for (ti, t) in inputs.iter().enumerate() {
            let grad = grads[vars[ti].0].as_ref().expect("missing leaf gradient");
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ad = grad.data()[i];
                let denom = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    (fd - ad).abs() / denom < tol,
                    "input {ti} elem {i}: fd={fd} ad={ad}"
                );
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = randn(&[4, 4], 1);
        let b = randn(&[4, 4], 2);
        fd_check(&[a, b], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum_all(c)
        }, 1e-6);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let a = randn(&[3, 5], 3);
        let b = randn(&[3, 5], 4);
        fd_check(&[a.clone(), b.clone()], |g, v| {
            let c = g.mul(v[0], v[1]).unwrap();
            g.sum_all(c)
        }, 1e-6);
        fd_check(&[a.clone(), b.clone()], |g, v| {
            let c = g.sub(v[0], v[1]).unwrap();
            let d = g.mul(c, c).unwrap();
            g.sum_all(d)
        }, 1e-6);
        // row-broadcast add
        let bias = randn(&[1, 5], 5);
        fd_check(&[a.clone(), bias], |g, v| {
            let c = g.add(v[0], v[1]).unwrap();
            let d = g.mul(c, c).unwrap();
            g.sum_all(d)
        }, 1e-6);
        fd_check(&[a.clone()], |g, v| {
            let c = g.gelu(v[0]);
            g.sum_all(c)
        }, 1e-6);
        // keep relu inputs away from the kink
        let off = a.map(|x| if x.abs() < 0.1 { x + 0.5 } else { x });
        fd_check(&[off], |g, v| {
            let c = g.relu(v[0]);
            let d = g.mul(c, c).unwrap();
            g.sum_all(d)
        }, 1e-5);
    }

    #[test]
    fn add_identity_and_gelu_zero() {
        let mut g = Graph::<f64>::new();
        let x = randn(&[2, 3], 9);
        let a = g.leaf(x.clone(), false);
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s), &x);
        assert_eq!(gelu_fwd(0.0f64), 0.0);
    }

    #[test]
    fn softmax_symmetry_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = randn(&[3, 4], 6);
        let w = randn(&[3, 4], 7);
        fd_check(&[a.clone()], |g, v| {
            let s = g.softmax(v[0], 1).unwrap();
            let wc = g.constant(w.clone());
            let p = g.mul(s, wc).unwrap();
            g.sum_all(p)
        }, 1e-6);
        // column softmax too
        let w2 = randn(&[3, 4], 8);
        fd_check(&[a], |g, v| {
            let s = g.softmax(v[0], 0).unwrap();
            let wc = g.constant(w2.clone());
            let p = g.mul(s, wc).unwrap();
            g.sum_all(p)
        }, 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randn(&[5, 7], 11);
        let y = softmax_rows(&x);
        for i in 0..5 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_yields_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(&[2, 4], 3.7));
        let gain = g.constant(Tensor::ones(&[1, 4]));
        let bias = g.constant(Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let expected = [0.1, 0.2, 0.3, 0.4][j];
                assert!((g.value(y).get2(i, j) - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_and_gradient_checks() {
        let x = randn(&[3, 6], 12);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let gain = g.constant(Tensor::ones(&[1, 6]));
        let bias = g.constant(Tensor::zeros(&[1, 6]));
        let y = g.layer_norm(xv, gain, bias, 1e-9).unwrap();
        for i in 0..3 {
            let row = g.value(y).row(i);
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-6);
        }
        let gn = randn(&[1, 6], 13).map(|v| v + 2.0);
        let bs = randn(&[1, 6], 14);
        let w = randn(&[3, 6], 15);
        fd_check(&[x, gn, bs], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let wc = g.constant(w.clone());
            let p = g.mul(y, wc).unwrap();
            g.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn mse_masked_examples_and_oracle() {
        let mut g = Graph::<f64>::new();
        // fully masked-out error
        let pred = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap());
        let target = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mask = g.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let l = g.mse_masked(pred, target, mask).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        // unit error everywhere, mask all ones -> 1.0
        let pred = g.constant(Tensor::filled(&[2, 2], 2.0));
        let target = g.constant(Tensor::filled(&[2, 2], 1.0));
        let mask = g.constant(Tensor::ones(&[2, 2]));
        let l = g.mse_masked(pred, target, mask).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
        // all-zero mask -> 0 by convention
        let mask0 = g.constant(Tensor::zeros(&[2, 2]));
        let l0 = g.mse_masked(pred, target, mask0).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        // random case vs scalar loop oracle
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let t = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let m = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let mut se = 0.0;
        let mut cnt = 0.0;
        for i in 0..15 {
            if m.data()[i] == 1.0 {
                se += (p.data()[i] - t.data()[i]).powi(2);
                cnt += 1.0;
            }
        }
        let oracle = se / cnt;
        let mut g = Graph::new();
        let (pv, tv, mv) = (g.constant(p.clone()), g.constant(t.clone()), g.constant(m.clone()));
        let l = g.mse_masked(pv, tv, mv).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
        // gradient
        fd_check(&[p], |g, v| {
            let tv = g.constant(t.clone());
            let mv = g.constant(m.clone());
            g.mse_masked(v[0], tv, mv).unwrap()
        }, 1e-6);
    }

    #[test]
    fn structural_op_gradients() {
        let a = randn(&[4, 6], 31);
        let w = randn(&[4, 3], 32);
        fd_check(&[a.clone()], |g, v| {
            let s = g.slice_cols(v[0], 2, 5).unwrap();
            let wc = g.constant(w.clone());
            let p = g.mul(s, wc).unwrap();
            g.sum_all(p)
        }, 1e-6);
        let b = randn(&[2, 6], 33);
        fd_check(&[a.clone(), b.clone()], |g, v| {
            let c = g.concat_rows(&[v[0], v[1]]).unwrap();
            let d = g.mul(c, c).unwrap();
            g.sum_all(d)
        }, 1e-6);
        let c2 = randn(&[4, 2], 34);
        fd_check(&[a.clone(), c2], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]]).unwrap();
            let d = g.mul(c, c).unwrap();
            g.sum_all(d)
        }, 1e-6);
        fd_check(&[a.clone()], |g, v| {
            let t = g.transpose(v[0]).unwrap();
            let d = g.mul(t, t).unwrap();
            g.sum_all(d)
        }, 1e-6);
        fd_check(&[a.clone()], |g, v| {
            let m = g.mean_rows(v[0]).unwrap();
            let d = g.mul(m, m).unwrap();
            g.sum_all(d)
        }, 1e-6);
        let table = randn(&[7, 4], 35);
        fd_check(&[table], |g, v| {
            let r = g.gather_rows(v[0], &[0, 3, 3, 6]).unwrap();
            let d = g.mul(r, r).unwrap();
            g.sum_all(d)
        }, 1e-6);
        fd_check(&[a], |g, v| {
            let n = g.l2_normalize_rows(v[0]).unwrap();
            let wc = g.constant(randn(&[4, 6], 36));
            let p = g.mul(n, wc).unwrap();
            g.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn cross_entropy_and_batch_norm_gradients() {
        let logits = randn(&[5, 3], 41);
        fd_check(&[logits], |g, v| {
            g.cross_entropy_logits(v[0], &[0, 2, 1, 1, 0]).unwrap()
        }, 1e-6);

        let x = randn(&[6, 3], 42);
        let gain = randn(&[1, 3], 43).map(|v| v + 2.0);
        let bias = randn(&[1, 3], 44);
        let w = randn(&[6, 3], 45);
        fd_check(&[x, gain, bias], |g, v| {
            let (y, _, _) = g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let wc = g.constant(w.clone());
            let p = g.mul(y, wc).unwrap();
            g.sum_all(p)
        }, 1e-4);
    }

    #[test]
    fn im2col_conv_gradient() {
        let dims = ConvDims {
            batch: 2,
            height: 5,
            width: 5,
            channels: 2,
            kernel: 3,
            stride: 1,
        };
        let x = randn(&[2, 50], 51);
        let w = randn(&[4, 18], 52); // 4 out channels, 2*3*3 patch
        fd_check(&[x, w], |g, v| {
            let cols = g.im2col(v[0], dims).unwrap();
            let wt = g.transpose(v[1]).unwrap();
            let y = g.matmul(cols, wt).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn ntxent_hand_case_and_gradient() {
        // B=2, tau=1: positives identical unit vectors, negatives orthogonal.
        // Per anchor: -log(e / (e + 1 + 1)) since positive sim 1, two
        // orthogonal negatives sim 0 (self excluded).
        let z = Tensor::<f64>::new(
            vec![4, 2],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        // anchors 0,1 are view i; 2,3 view j; positives pair (i, i+2)
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let zn = g.l2_normalize_rows(zv).unwrap();
        let znt = g.transpose(zn).unwrap();
        let sim = g.matmul(zn, znt).unwrap();
        let loss = g.ntxent_from_similarities(sim, &[2, 3, 0, 1]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!(
            (g.value(loss).item() - expected).abs() < 1e-12,
            "{} vs {}",
            g.value(loss).item(),
            expected
        );
        assert!((expected - 0.5514).abs() < 1e-4);

        let proj = randn(&[6, 4], 61);
        fd_check(&[proj], |g, v| {
            let zn = g.l2_normalize_rows(v[0]).unwrap();
            let znt = g.transpose(zn).unwrap();
            let sim = g.matmul(zn, znt).unwrap();
            let sim = g.scale(sim, 1.0 / 0.5);
            g.ntxent_from_similarities(sim, &[3, 4, 5, 0, 1, 2]).unwrap()
        }, 1e-5);
    }

    #[test]
    fn determinism_same_seed_bit_identical() {
        let run = || {
            let a = randn(&[4, 4], 71);
            let b = randn(&[4, 4], 72);
            let mut g = Graph::new();
            let av = g.leaf(a, true);
            let bv = g.leaf(b, true);
            let c = g.matmul(av, bv).unwrap();
            let s = g.gelu(c);
            let l = g.sum_all(s);
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads[0].clone().unwrap())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
