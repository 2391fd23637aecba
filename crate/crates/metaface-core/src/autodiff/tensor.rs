//! Dense row-major f64 tensors.
//!
//! All numeric carriers in the crate (features, motion, weights, adapter
//! factors, latent codes) are `Tensor`s. Values are immutable once built;
//! every operation returns a fresh tensor. Published operations reject
//! non-finite results instead of letting NaN/Inf propagate silently.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// A rank-1 scalar carrier of shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// The single element of a scalar-shaped tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::NonScalarOutput {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Copy with one flat element replaced; used by finite-difference probes.
    pub fn with_element(&self, idx: usize, v: f64) -> Tensor {
        let mut data = self.data.clone();
        data[idx] = v;
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// 2-D element access; panics on rank/bounds misuse (internal helper).
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn zip(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    /// Concatenate along the last axis; all leading extents must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            Error::Config("concat requires at least one operand".to_string())
        })?;
        let rank = first.shape.len();
        let lead = &first.shape[..rank - 1];
        for p in parts {
            if p.shape.len() != rank || &p.shape[..rank - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[rank - 1]).collect();
        let total_w: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total_w);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_w);
        Ok(Tensor { shape, data: out })
    }

    /// Take `len` entries starting at `start` along the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape.len();
        if rank == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: self.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let w = self.shape[rank - 1];
        if len == 0 || start + len > w {
            return Err(Error::Config(format!(
                "slice [{start}, {start}+{len}) out of range for last extent {w}"
            )));
        }
        let rows: usize = self.shape[..rank - 1].iter().product();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * w + start..r * w + start + len]);
        }
        let mut shape = self.shape[..rank - 1].to_vec();
        shape.push(len);
        Ok(Tensor { shape, data: out })
    }

    /// Right-aligned broadcast: each source extent must be 1 or equal to the
    /// target extent; missing leading axes are treated as 1.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let rank = shape.len();
        if self.shape.len() > rank {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut src = vec![1usize; rank];
        src[rank - self.shape.len()..].copy_from_slice(&self.shape);
        for (s, t) in src.iter().zip(shape) {
            if *s != 1 && s != t {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        let mut src_strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            src_strides[d] = if src[d] == 1 { 0 } else { acc };
            acc *= src[d];
        }
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut rem = flat;
            let mut src_idx = 0;
            for d in (0..rank).rev() {
                let c = rem % shape[d];
                rem /= shape[d];
                src_idx += c * src_strides[d];
            }
            *slot = self.data[src_idx];
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Adjoint of `broadcast_to`: sum entries back down to `shape`.
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let rank = self.shape.len();
        if shape.len() > rank {
            return Err(Error::ShapeMismatch {
                op: "reduce",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut dst = vec![1usize; rank];
        dst[rank - shape.len()..].copy_from_slice(shape);
        for (d, s) in dst.iter().zip(&self.shape) {
            if *d != 1 && d != s {
                return Err(Error::ShapeMismatch {
                    op: "reduce",
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
        }
        let out_numel: usize = shape.iter().product();
        let mut out = vec![0.0; out_numel];
        let mut dst_strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            dst_strides[d] = if dst[d] == 1 { 0 } else { acc };
            acc *= dst[d];
        }
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut dst_idx = 0;
            for d in (0..rank).rev() {
                let c = rem % self.shape[d];
                rem /= self.shape[d];
                dst_idx += c * dst_strides[d];
            }
            out[dst_idx] += v;
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: out,
        })
    }
}
