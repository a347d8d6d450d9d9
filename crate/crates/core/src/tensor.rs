//! Dense 4D tensor (batch, height, width, channel) with channel-fastest layout.
//!
//! Every layer reads and writes [`Tensor4`]: activities in estimation mode and
//! control signals in sampling mode share the same container.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a [`Tensor4`] along the batch, height, width and channel axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Dims { n, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Number of elements in one sample.
    pub fn per_sample(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Same spatial/channel extents with a different batch size.
    pub fn with_batch(&self, n: usize) -> Self {
        Dims { n, ..*self }
    }

    #[inline]
    pub fn offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new_filled(dims: Dims, value: f64) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::new_filled(dims, 0.0)
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "buffer of length {} does not fit dims {dims}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.checked_offset(n, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, value: f64) {
        let i = self.checked_offset(n, h, w, c);
        self.data[i] = value;
    }

    #[inline]
    fn checked_offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        let d = self.dims;
        assert!(
            n < d.n && h < d.h && w < d.w && c < d.c,
            "index ({n},{h},{w},{c}) out of range for {d}"
        );
        d.offset(n, h, w, c)
    }

    /// The channel vector stored at position `(n, h, w)`.
    pub fn slice_channel_vector(&self, n: usize, h: usize, w: usize) -> &[f64] {
        let start = self.checked_offset(n, h, w, 0);
        &self.data[start..start + self.dims.c]
    }

    pub fn channel_vector_mut(&mut self, n: usize, h: usize, w: usize) -> &mut [f64] {
        let start = self.checked_offset(n, h, w, 0);
        let c = self.dims.c;
        &mut self.data[start..start + c]
    }

    /// All elements of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        assert!(n < self.dims.n, "sample {n} out of range for {}", self.dims);
        let len = self.dims.per_sample();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        assert!(n < self.dims.n, "sample {n} out of range for {}", self.dims);
        let len = self.dims.per_sample();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Gathers the given samples (in order) into a new tensor.
    pub fn select_samples(&self, indices: &[usize]) -> Tensor4 {
        let len = self.dims.per_sample();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 {
            dims: self.dims.with_batch(indices.len()),
            data,
        }
    }

    /// Samples `start..end` as a new tensor.
    pub fn batch_range(&self, start: usize, end: usize) -> Tensor4 {
        assert!(start <= end && end <= self.dims.n);
        let len = self.dims.per_sample();
        Tensor4 {
            dims: self.dims.with_batch(end - start),
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims.with_batch(0) != first.dims.with_batch(0) {
                return Err(Error::Shape(format!(
                    "cannot concatenate {} with {}",
                    first.dims, p.dims
                )));
            }
            n += p.dims.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            dims: first.dims.with_batch(n),
            data,
        })
    }

    /// Same buffer viewed under different dims of equal length.
    pub fn reshape(self, dims: Dims) -> Result<Tensor4> {
        Tensor4::from_vec(dims, self.data)
    }

    /// Arithmetic mean over the spatial axes for every `(n, c)` pair,
    /// returned as an `n * c` vector with `c` fastest.
    pub fn reduce_mean_over_positions(&self) -> Result<Vec<f64>> {
        let d = self.dims;
        let positions = d.positions();
        if positions == 0 {
            return Err(Error::EmptySpatialExtent);
        }
        let mut out = vec![0.0; d.n * d.c];
        for n in 0..d.n {
            let acc = &mut out[n * d.c..(n + 1) * d.c];
            for chunk in self.sample(n).chunks_exact(d.c) {
                for (a, v) in acc.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= positions as f64;
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }
}
