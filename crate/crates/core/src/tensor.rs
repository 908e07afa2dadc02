//! Dense row-major `f64` tensors and the handful of kernels the reference
//! modules are assembled from.
//!
//! Everything here is a pure function of its inputs. Shapes are checked up
//! front and reported through [`Error::ShapeMismatch`] naming the dimension
//! that disagreed.

use crate::error::{invalid, Error, Result};

/// A dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Wraps `data` with the given `shape`.
    ///
    /// Fails unless the rank is at least one, every extent is positive and
    /// the extents multiply out to `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len])
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut index = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&index));
            for axis in (0..shape.len()).rev() {
                index[axis] += 1;
                if index[axis] < shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    /// Element at a full multi-index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let offset = self.offset(index);
        self.data[offset] = value;
    }

    /// Same data viewed with another shape of equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_same_shape(op, &self.shape, &other.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        check_same_shape("max_abs_diff", &self.shape, &other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Slice `index` along the leading axis, dropping that axis.
    pub fn index_axis0(&self, index: usize) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::RankMismatch {
                op: "index_axis0",
                expected: 2,
                found: self.shape.clone(),
            });
        }
        if index >= self.shape[0] {
            return Err(invalid("index_axis0", format!("index {index} out of range {}", self.shape[0])));
        }
        let inner: usize = self.shape[1..].iter().product();
        Self::new(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for part in parts {
            check_same_shape("stack", &first.shape, &part.shape)?;
            data.extend_from_slice(&part.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::RankMismatch {
                op,
                expected: rank,
                found: self.shape.clone(),
            });
        }
        Ok(())
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            dim: "rank",
            expected: a.len(),
            found: b.len(),
        });
    }
    for (&x, &y) in a.iter().zip(b) {
        if x != y {
            return Err(Error::ShapeMismatch {
                op,
                dim: "extent",
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

/// A 2-D convolution kernel: weights `[out, in, kh, kw]` and bias `[out]`.
///
/// Both kernel extents must be odd so that same-size zero padding is centred.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        weight.expect_rank("conv2d kernel", 4)?;
        bias.expect_rank("conv2d bias", 1)?;
        let [out, _, kh, kw] = dims4(&weight);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid("conv2d kernel", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if bias.shape()[0] != out {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel",
                dim: "bias length",
                expected: out,
                found: bias.shape()[0],
            });
        }
        Ok(Self { weight, bias })
    }

    /// All-zero kernel of the given geometry.
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[out_channels, in_channels, kh, kw])?,
            Tensor::zeros(&[out_channels])?,
        )
    }

    /// 1×1 kernel copying input channel `o % in` into output channel `o`.
    pub fn copy_1x1(out_channels: usize, in_channels: usize) -> Result<Self> {
        let weight = Tensor::from_fn(&[out_channels, in_channels, 1, 1], |i| {
            if i[1] == i[0] % in_channels {
                1.0
            } else {
                0.0
            }
        })?;
        Self::new(weight, Tensor::zeros(&[out_channels])?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `(kh, kw)`.
    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub(crate) fn dims3(t: &Tensor) -> [usize; 3] {
    let s = t.shape();
    [s[0], s[1], s[2]]
}

pub(crate) fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Same-size 2-D cross-correlation with zero padding.
///
/// `out[o,y,x] = bias[o] + Σ_{c,dy,dx} w[o,c,dy,dx] · x[c, y+dy-kh/2, x+dx-kw/2]`,
/// reading zero outside the input.
pub fn conv2d(x: &Tensor, kernel: &Conv2d) -> Result<Tensor> {
    x.expect_rank("conv2d", 3)?;
    let [channels, height, width] = dims3(x);
    let [out_channels, in_channels, kh, kw] = dims4(&kernel.weight);
    if channels != in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dim: "input channels",
            expected: in_channels,
            found: channels,
        });
    }
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = height * width;
    let input = x.data();
    let weights = kernel.weight.data();
    let mut out = vec![0.0; out_channels * plane];

    for o in 0..out_channels {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(kernel.bias.data()[o]);
        for c in 0..in_channels {
            let in_plane = &input[c * plane..(c + 1) * plane];
            for dy in 0..kh {
                let oy = dy as isize - ry;
                let y_lo = (-oy).max(0) as usize;
                let y_hi = (height as isize - oy).min(height as isize).max(0) as usize;
                for dx in 0..kw {
                    let w = weights[((o * in_channels + c) * kh + dy) * kw + dx];
                    if w == 0.0 {
                        continue;
                    }
                    let ox = dx as isize - rx;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (width as isize - ox).min(width as isize).max(0) as usize;
                    for y in y_lo..y_hi {
                        let src_row = (y as isize + oy) as usize * width;
                        let dst_row = y * width;
                        for xx in x_lo..x_hi {
                            out_plane[dst_row + xx] += w * in_plane[(src_row as isize + xx as isize + ox) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![out_channels, height, width], out)
}

/// Adaptive max pooling of a `[C,H,W]` map down to `[C,out_h,out_w]`.
///
/// Bin `i` along an axis of extent `n` spans `floor(i·n/out) .. ceil((i+1)·n/out)`.
pub fn adaptive_max_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    x.expect_rank("adaptive_max_pool", 3)?;
    let [channels, height, width] = dims3(x);
    if out_h == 0 || out_w == 0 {
        return Err(invalid("adaptive_max_pool", "output extents must be positive"));
    }
    if out_h > height || out_w > width {
        return Err(invalid(
            "adaptive_max_pool",
            format!("cannot pool {height}x{width} up to {out_h}x{out_w}"),
        ));
    }
    let bins = |n: usize, out: usize, i: usize| (i * n / out, ((i + 1) * n).div_ceil(out));
    let mut data = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        for i in 0..out_h {
            let (y0, y1) = bins(height, out_h, i);
            for j in 0..out_w {
                let (x0, x1) = bins(width, out_w, j);
                let mut best = f64::NEG_INFINITY;
                for y in y0..y1 {
                    let row = (c * height + y) * width;
                    for v in &x.data()[row + x0..row + x1] {
                        best = best.max(*v);
                    }
                }
                data.push(best);
            }
        }
    }
    Tensor::new(vec![channels, out_h, out_w], data)
}

/// Bilinear upsampling with half-pixel centres and edge clamping.
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    x.expect_rank("bilinear_upsample", 3)?;
    let [channels, height, width] = dims3(x);
    if out_h < height || out_w < width {
        return Err(invalid(
            "bilinear_upsample",
            format!("cannot upsample {height}x{width} down to {out_h}x{out_w}"),
        ));
    }
    let taps = |n: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * (n as f64 / out as f64) - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let rows = taps(height, out_h);
    let cols = taps(width, out_w);
    let src = x.data();
    let mut data = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let base = c * height * width;
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = src[base + y0 * width + x0] * (1.0 - fx) + src[base + y0 * width + x1] * fx;
                let bottom = src[base + y1 * width + x0] * (1.0 - fx) + src[base + y1 * width + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![channels, out_h, out_w], data)
}

/// Affine map along the last axis: `x · W + b` with `W` of shape `[d_in, d_out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    weight.expect_rank("linear weight", 2)?;
    bias.expect_rank("linear bias", 1)?;
    let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
    let last = *x.shape().last().expect("rank >= 1");
    if last != d_in {
        return Err(Error::ShapeMismatch {
            op: "linear",
            dim: "input features",
            expected: d_in,
            found: last,
        });
    }
    if bias.shape()[0] != d_out {
        return Err(Error::ShapeMismatch {
            op: "linear",
            dim: "bias length",
            expected: d_out,
            found: bias.shape()[0],
        });
    }
    let rows = x.len() / d_in;
    let w = weight.data();
    let mut data = Vec::with_capacity(rows * d_out);
    for row in x.data().chunks_exact(d_in) {
        let mut acc = bias.data().to_vec();
        for (i, &xi) in row.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let w_row = &w[i * d_out..(i + 1) * d_out];
            for (a, &wv) in acc.iter_mut().zip(w_row) {
                *a += xi * wv;
            }
        }
        data.extend(acc);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, data)
}

/// Numerically stable softmax along the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let n = *x.shape().last().expect("rank >= 1");
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(n) {
        let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - peak).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learned scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().expect("rank >= 1");
    for (param, dim) in [(gamma, "gamma length"), (beta, "beta length")] {
        if param.len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                dim,
                expected: d,
                found: param.len(),
            });
        }
    }
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        data.extend(
            row.iter()
                .zip(gamma.data().iter().zip(beta.data()))
                .map(|(&v, (&g, &b))| (v - mean) * inv * g + b),
        );
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// `[n, k] · [k, m]` matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let (k2, m) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            dim: "inner",
            expected: k,
            found: k2,
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a.data()[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * b.data()[p * m + j];
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    a.expect_rank("transpose", 2)?;
    let (n, m) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(&[m, n], |i| a.data()[i[1] * m + i[0]])
}
