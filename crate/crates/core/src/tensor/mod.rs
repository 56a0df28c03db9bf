//! Dense row-major tensors and the reverse-mode tape built on top of them.

pub mod kernels;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense row-major tensor. The buffer is shared, so reshapes and tape
/// snapshots are cheap; data is never mutated after construction.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(data: Vec<S>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension(format!(
                "buffer length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![S::ZERO; numel]) }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_f64_slice(values: &[f64], shape: Vec<usize>) -> Result<Self> {
        Tensor::new(values.iter().map(|&v| S::from_f64(v)).collect(), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Same buffer under a new shape (no copy).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} (numel {}) to {:?} (numel {})",
                self.shape,
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|v| v.to_f64())
    }

    pub fn assert_all_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value in {context}")));
        }
        Ok(())
    }
}

// ── Row-major index arithmetic ──────────────────────────────────────

/// Strides for a row-major layout: stride_j = product of trailing dims.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn flat_index(multi: &[usize], shape: &[usize]) -> usize {
    debug_assert_eq!(multi.len(), shape.len());
    let mut idx = 0;
    for (d, (&i, &n)) in multi.iter().zip(shape.iter()).enumerate() {
        debug_assert!(i < n, "index {i} out of bounds for dim {d} of size {n}");
        idx = idx * n + i;
    }
    idx
}

pub fn multi_index(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut multi = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        multi[d] = flat % shape[d];
        flat /= shape[d];
    }
    multi
}
