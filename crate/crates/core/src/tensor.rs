//! Dense row-major tensors.
//!
//! Data lives behind an `Arc`, so tensors are immutable after construction,
//! cheap to clone, and safe to share read-only across threads. Reshape is a
//! relabeling that shares the buffer.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if expect != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {expect} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![F::ZERO; n]),
        }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// First (only) element of a scalar tensor.
    pub fn item(&self) -> F {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row-major strides derived from the shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Same buffer, new shape. Element count must be preserved.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn flattened(&self) -> Self {
        Tensor {
            shape: vec![self.numel()],
            data: Arc::clone(&self.data),
        }
    }

    /// True when both tensors hold bit-identical buffers and shapes.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.numel() == other.numel()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_le_bytes_vec() == b.to_le_bytes_vec())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }
}

/// FNV-1a over the little-endian bytes of a scalar slice. Used for
/// cheap "did this buffer change" audits.
pub fn checksum_scalars<F: Scalar>(data: &[F]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in data {
        for b in v.to_le_bytes_vec() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

pub fn checksum_f32(data: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in data {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
