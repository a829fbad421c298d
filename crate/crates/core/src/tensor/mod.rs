//! Dense rank-4 tensors and the neural operators built on them.
//!
//! Data is stored as 32-bit floats in `(n, c, h, w)` order. Reductions
//! (convolution, pooling, normalization) accumulate in 64-bit and round
//! once on store.

mod ops;
mod store;

pub use ops::{
    activate, batchnorm_infer, bilinear_upsample2x, concat_channels, conv2d, depthwise_conv2d, global_avg_pool,
    resize_bilinear, scale_channels, softmax_channels, Activation, BatchNorm, ConvWeights,
};
pub use store::{ManifestEntry, WeightStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tensor extents. `c` may be zero (a channel-less placeholder); the
/// other extents are at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.n == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::shape(format!(
                "batch and spatial extents must be positive, got {dims}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "data length {} does not match dims {dims} ({} values)",
                data.len(),
                dims.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        assert!(dims.n > 0 && dims.h > 0 && dims.w > 0, "empty dims {dims}");
        Tensor {
            dims,
            data: vec![value; dims.len()],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        assert!(dims.n > 0 && dims.h > 0 && dims.w > 0, "empty dims {dims}");
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// The `h × w` plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum of two tensors with identical dims.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("cannot add {} and {}", self.dims, other.dims)));
        }
        Ok(Tensor {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Extracts batch item `n` as a batch-of-one tensor.
    pub fn item(&self, n: usize) -> Tensor {
        let per = self.dims.c * self.dims.plane();
        Tensor {
            dims: Dims::new(1, self.dims.c, self.dims.h, self.dims.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks batch-of-any tensors with matching `(c, h, w)` along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list of tensors"))?;
        let d = first.dims;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if (t.dims.c, t.dims.h, t.dims.w) != (d.c, d.h, d.w) {
                return Err(Error::shape(format!("cannot stack {} with {}", d, t.dims)));
            }
            n += t.dims.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Dims::new(n, d.c, d.h, d.w), data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
