use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dims, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the f64 im2col buffer, in elements (4 MiB).
const IM2COL_BUDGET: usize = 1 << 19;

/// Convolution kernel plus its geometry.
///
/// `kernel` is laid out `(out_channels, in_channels_per_group, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Vec<f32>,
    pub out_channels: usize,
    pub in_per_group: usize,
    pub kh: usize,
    pub kw: usize,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kernel: Vec<f32>,
        out_channels: usize,
        in_per_group: usize,
        kh: usize,
        kw: usize,
        bias: Option<Vec<f32>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if out_channels == 0 || in_per_group == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("convolution extents must be positive"));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::shape("stride and groups must be positive"));
        }
        if !out_channels.is_multiple_of(groups) {
            return Err(Error::shape(format!(
                "out_channels {out_channels} not divisible by groups {groups}"
            )));
        }
        let expected = out_channels * in_per_group * kh * kw;
        if kernel.len() != expected {
            return Err(Error::shape(format!(
                "kernel has {} values, expected {expected} for ({out_channels}, {in_per_group}, {kh}, {kw})",
                kernel.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::shape(format!(
                    "bias has {} values, expected {out_channels}",
                    b.len()
                )));
            }
        }
        Ok(ConvWeights {
            kernel,
            out_channels,
            in_per_group,
            kh,
            kw,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// A dense square convolution with `groups = 1`.
    pub fn dense(
        kernel: Vec<f32>,
        out_channels: usize,
        in_channels: usize,
        k: usize,
        bias: Option<Vec<f32>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::new(kernel, out_channels, in_channels, k, k, bias, stride, padding, 1)
    }

    /// A depthwise square convolution over `channels` channels.
    pub fn depthwise(
        kernel: Vec<f32>,
        channels: usize,
        k: usize,
        bias: Option<Vec<f32>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::new(kernel, channels, 1, k, k, bias, stride, padding, channels)
    }

    pub fn in_channels(&self) -> usize {
        self.groups * self.in_per_group
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        if input.c != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {} channels, convolution expects {} ({} groups x {})",
                input.c,
                self.in_channels(),
                self.groups,
                self.in_per_group
            )));
        }
        let ph = input.h + 2 * self.padding;
        let pw = input.w + 2 * self.padding;
        if ph < self.kh || pw < self.kw {
            return Err(Error::shape(format!(
                "padded input {ph}x{pw} smaller than kernel {}x{}",
                self.kh, self.kw
            )));
        }
        Ok(Dims::new(
            input.n,
            self.out_channels,
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }
}

/// 2-D cross-correlation (no kernel flip) with stride, symmetric zero
/// padding and channel groups.
pub fn conv2d(input: &Tensor, weights: &ConvWeights) -> Result<Tensor> {
    let out_dims = weights.output_dims(input.dims())?;
    let data = if weights.groups == 1 {
        conv_dense(input, weights, out_dims)
    } else {
        conv_grouped(input, weights, out_dims)
    };
    Tensor::new(out_dims, data)
}

/// Depthwise convolution: one kernel per channel, `groups = channels`.
pub fn depthwise_conv2d(input: &Tensor, weights: &ConvWeights) -> Result<Tensor> {
    let c = input.dims().c;
    if weights.groups != c || weights.out_channels != c || weights.in_per_group != 1 {
        return Err(Error::shape(format!(
            "depthwise convolution over {c} channels needs groups = out_channels = {c}, got groups {} out {}",
            weights.groups, weights.out_channels
        )));
    }
    conv2d(input, weights)
}

// Dense path: im2col over bands of output rows, then a f64 GEMM.
fn conv_dense(input: &Tensor, wt: &ConvWeights, out: Dims) -> Vec<f32> {
    let inp = input.dims();
    let k = wt.in_per_group * wt.kh * wt.kw;
    let a: Vec<f64> = wt.kernel.iter().map(|&v| v as f64).collect();
    let rows_per_band = (IM2COL_BUDGET / (k * out.w)).clamp(1, out.h);
    let bands: Vec<(usize, usize)> = (0..inp.n)
        .flat_map(|n| (0..out.h).step_by(rows_per_band).map(move |y0| (n, y0)))
        .collect();

    let results: Vec<Vec<f64>> = bands
        .par_iter()
        .map(|&(n, y0)| {
            let y1 = (y0 + rows_per_band).min(out.h);
            let cols_n = (y1 - y0) * out.w;
            let mut cols = vec![0.0f64; k * cols_n];
            for ic in 0..wt.in_per_group {
                let plane = input.plane(n, ic);
                for ky in 0..wt.kh {
                    for kx in 0..wt.kw {
                        let r = (ic * wt.kh + ky) * wt.kw + kx;
                        let row = &mut cols[r * cols_n..(r + 1) * cols_n];
                        for oy in y0..y1 {
                            let iy = (oy * wt.stride + ky) as isize - wt.padding as isize;
                            if iy < 0 || iy >= inp.h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * inp.w..(iy as usize + 1) * inp.w];
                            let dst = &mut row[(oy - y0) * out.w..(oy - y0 + 1) * out.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * wt.stride + kx) as isize - wt.padding as isize;
                                if ix >= 0 && (ix as usize) < inp.w {
                                    *d = src[ix as usize] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let mut c = vec![0.0f64; out.c * cols_n];
            // SAFETY: all slices are sized m*k, k*n and m*n with row-major strides.
            unsafe {
                matrixmultiply::dgemm(
                    out.c,
                    k,
                    cols_n,
                    1.0,
                    a.as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    cols_n as isize,
                    1,
                    0.0,
                    c.as_mut_ptr(),
                    cols_n as isize,
                    1,
                );
            }
            c
        })
        .collect();

    let mut data = vec![0.0f32; out.len()];
    for (&(n, y0), c) in bands.iter().zip(&results) {
        let cols_n = c.len() / out.c;
        for oc in 0..out.c {
            let bias = wt.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
            let start = ((n * out.c + oc) * out.h + y0) * out.w;
            for (d, &v) in data[start..start + cols_n]
                .iter_mut()
                .zip(&c[oc * cols_n..(oc + 1) * cols_n])
            {
                *d = (v + bias) as f32;
            }
        }
    }
    data
}

// Grouped path: direct accumulation, one output plane per task.
fn conv_grouped(input: &Tensor, wt: &ConvWeights, out: Dims) -> Vec<f32> {
    let inp = input.dims();
    let out_per_group = wt.out_channels / wt.groups;
    let mut data = vec![0.0f32; out.len()];
    data.par_chunks_mut(out.plane())
        .enumerate()
        .for_each(|(idx, plane_out)| {
            let n = idx / out.c;
            let oc = idx % out.c;
            let g = oc / out_per_group;
            let bias = wt.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
            let mut acc = vec![0.0f64; out.w];
            for oy in 0..out.h {
                acc.iter_mut().for_each(|a| *a = bias);
                for icg in 0..wt.in_per_group {
                    let plane = input.plane(n, g * wt.in_per_group + icg);
                    for ky in 0..wt.kh {
                        let iy = (oy * wt.stride + ky) as isize - wt.padding as isize;
                        if iy < 0 || iy >= inp.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * inp.w..(iy as usize + 1) * inp.w];
                        for kx in 0..wt.kw {
                            let w = wt.kernel[((oc * wt.in_per_group + icg) * wt.kh + ky) * wt.kw + kx] as f64;
                            let (lo, hi) = valid_range(out.w, inp.w, wt.stride, kx, wt.padding);
                            for ox in lo..hi {
                                let ix = ox * wt.stride + kx - wt.padding;
                                acc[ox] += w * src[ix] as f64;
                            }
                        }
                    }
                }
                for (d, a) in plane_out[oy * out.w..(oy + 1) * out.w].iter_mut().zip(&acc) {
                    *d = *a as f32;
                }
            }
        });
    data
}

/// Output columns `ox` for which `ox*stride + kx - pad` lands inside `[0, in_w)`.
fn valid_range(out_w: usize, in_w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // ox*stride + kx - pad <= in_w - 1
    let limit = in_w + pad - 1;
    let hi = if limit < kx {
        0
    } else {
        ((limit - kx) / stride + 1).min(out_w)
    };
    (lo, hi.max(lo))
}

/// Inference-mode batch normalization parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    /// `gamma = 1, beta = 0, mean = 0, var = 1`.
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

pub fn batchnorm_infer(input: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let d = input.dims();
    let c = bn.gamma.len();
    if bn.beta.len() != c || bn.mean.len() != c || bn.var.len() != c || c != d.c {
        return Err(Error::shape(format!(
            "batch norm vectors (gamma {}, beta {}, mean {}, var {}) do not match {} channels",
            bn.gamma.len(),
            bn.beta.len(),
            bn.mean.len(),
            bn.var.len(),
            d.c
        )));
    }
    if bn.eps < 0.0 {
        return Err(Error::precondition("batch norm eps must be non-negative"));
    }
    let mut params = Vec::with_capacity(c);
    for ch in 0..c {
        let denom = bn.var[ch] as f64 + bn.eps as f64;
        if bn.var[ch] < 0.0 || denom <= 0.0 {
            return Err(Error::precondition(format!(
                "batch norm channel {ch}: var + eps must be positive"
            )));
        }
        params.push((
            bn.mean[ch] as f64,
            bn.gamma[ch] as f64 / denom.sqrt(),
            bn.beta[ch] as f64,
        ));
    }
    let mut data = input.data().to_vec();
    for (idx, plane) in data.chunks_mut(d.plane()).enumerate() {
        let (mean, scale, beta) = params[idx % d.c];
        for v in plane {
            *v = ((*v as f64 - mean) * scale + beta) as f32;
        }
    }
    Tensor::new(d, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x as f64) as f32,
            Activation::Swish => (x as f64 * sigmoid(x as f64)) as f32,
            Activation::Linear => x,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activate(input: &Tensor, kind: Activation) -> Tensor {
    if kind == Activation::Linear {
        return input.clone();
    }
    input.map(|x| kind.apply(x))
}

/// Mean over each `h × w` plane; output dims `(n, c, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let d = input.dims();
    let count = d.plane() as f64;
    let data = input
        .data()
        .chunks(d.plane())
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / count) as f32)
        .collect();
    Tensor {
        dims: Dims::new(d.n, d.c, 1, 1),
        data,
    }
}

/// Multiplies every plane `(n, c)` by `gate[n, c]`; `gate` has dims `(n, c, 1, 1)`.
pub fn scale_channels(input: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let d = input.dims();
    let g = gate.dims();
    if g != Dims::new(d.n, d.c, 1, 1) {
        return Err(Error::shape(format!("channel gate {g} does not match input {d}")));
    }
    let mut data = input.data().to_vec();
    for (plane, &s) in data.chunks_mut(d.plane()).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::new(d, data)
}

/// Bilinear resampling with half-pixel centers: the source coordinate of
/// destination index `i` is `(i + 0.5) * in / out - 0.5`, clamped to the
/// valid range.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    let d = input.dims();
    let ys = sample_axis(d.h, out_h);
    let xs = sample_axis(d.w, out_w);
    let out = Dims::new(d.n, d.c, out_h, out_w);
    let mut data = Vec::with_capacity(out.len());
    for plane in input.data().chunks(d.plane()) {
        for &(y0, y1, fy) in &ys {
            let r0 = &plane[y0 * d.w..(y0 + 1) * d.w];
            let r1 = &plane[y1 * d.w..(y1 + 1) * d.w];
            for &(x0, x1, fx) in &xs {
                let (a, b) = (r0[x0] as f64, r0[x1] as f64);
                let (c, e) = (r1[x0] as f64, r1[x1] as f64);
                let top = a + (b - a) * fx;
                let bottom = c + (e - c) * fx;
                data.push((top + (bottom - top) * fy) as f32);
            }
        }
    }
    Tensor::new(out, data)
}

fn sample_axis(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    let max = (len_in - 1) as f64;
    (0..len_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_upsample2x(input: &Tensor) -> Tensor {
    let d = input.dims();
    resize_bilinear(input, 2 * d.h, 2 * d.w).expect("doubling a non-empty tensor")
}

/// Concatenates along channels, `a`'s channels first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (da, db) = (a.dims(), b.dims());
    if (da.n, da.h, da.w) != (db.n, db.h, db.w) {
        return Err(Error::shape(format!(
            "cannot concatenate {da} and {db}: batch/spatial extents differ"
        )));
    }
    let per_a = da.c * da.plane();
    let per_b = db.c * db.plane();
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for n in 0..da.n {
        data.extend_from_slice(&a.data()[n * per_a..(n + 1) * per_a]);
        data.extend_from_slice(&b.data()[n * per_b..(n + 1) * per_b]);
    }
    Tensor::new(Dims::new(da.n, da.c + db.c, da.h, da.w), data)
}

/// Softmax across channels at every `(n, y, x)` site.
pub fn softmax_channels(input: &Tensor) -> Tensor {
    let d = input.dims();
    let plane = d.plane();
    let mut data = vec![0.0f32; d.len()];
    let mut buf = vec![0.0f64; d.c];
    for n in 0..d.n {
        let base = n * d.c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..d.c {
                buf[c] = input.data()[base + c * plane + p] as f64;
                max = max.max(buf[c]);
            }
            let mut sum = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for c in 0..d.c {
                data[base + c * plane + p] = (buf[c] / sum) as f32;
            }
        }
    }
    Tensor { dims: d, data }
}
