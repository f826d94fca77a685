//! Dense row-major tensors.
//!
//! [`Tensor`] is a plain value type; gradients and operation recording live
//! in [`crate::graph`]. The matmul kernels here are shared by the forward
//! and backward passes and carry most of the compute, so they are written
//! to auto-vectorize (i-k-j loop order, contiguous row slices).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Normal(0, std²) initialization.
    pub fn randn<R: Rng>(shape: &[usize], std: T, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                T::from_f64(x) * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row and column count of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected 2-D tensor, got {s:?}"))),
        }
    }

    #[inline]
    pub fn get2(&self, r: usize, c: usize) -> T {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * alpha;
        }
    }

    pub fn scale_inplace(&mut self, alpha: T) {
        for a in self.data.iter_mut() {
            *a = *a * alpha;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert element type (used when moving between pipeline and oracle
    /// precision and when reading/writing the 32-bit container format).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// C = A·B for 2-D operands.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (kb, n) = b.dims2()?;
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, b.shape
            )));
        }
        let mut out = Self::zeros(&[m, n]);
        matmul_nn(&self.data, &b.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// C = A·Bᵀ.
    pub fn matmul_nt(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, kb) = b.dims2()?;
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul_nt inner extents differ: {:?} x {:?}ᵀ",
                self.shape, b.shape
            )));
        }
        let mut out = Self::zeros(&[m, n]);
        matmul_nt(&self.data, &b.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// C = Aᵀ·B.
    pub fn matmul_tn(&self, b: &Self) -> Result<Self> {
        let (k, m) = self.dims2()?;
        let (kb, n) = b.dims2()?;
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul_tn inner extents differ: {:?}ᵀ x {:?}",
                self.shape, b.shape
            )));
        }
        let mut out = Self::zeros(&[m, n]);
        matmul_tn(&self.data, &b.data, &mut out.data, m, k, n);
        Ok(out)
    }
}

/// Below this many scalar multiply-adds the rayon dispatch overhead wins.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// Run one output row; accumulation order inside a row is fixed, so the
/// result is bit-identical whether rows run serially or in parallel.
fn row_parallel<T: Scalar>(
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    body: impl Fn(usize, &mut [T]) + Send + Sync,
) {
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
}

pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    row_parallel(c, m, k, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    });
}

pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    row_parallel(c, m, k, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    });
}

pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    row_parallel(c, m, k, n, |i, crow| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    });
}
