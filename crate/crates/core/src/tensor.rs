//! Dense `f64` arrays and the forward/backward kernels the U-Net is built from.
//!
//! Every spatial op works on a single sample laid out as `[channels, height, width]`
//! in row-major order. Batching happens one level up, in the trainer.
//!
//! Convolutions go through an im2col lowering and a GEMM; the GEMM itself is
//! `matrixmultiply::dgemm`, which is single-threaded and deterministic for a fixed
//! input, so results are bit-stable across runs.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch on {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("expected a rank-{expected} tensor, found rank {found}")]
    Rank { expected: usize, found: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{axis} extent {extent} is odd")]
    OddExtent { axis: &'static str, extent: usize },
    #[error("{axis} extent {extent} is smaller than the required {required}")]
    TooSmall {
        axis: &'static str,
        extent: usize,
        required: usize,
    },
    #[error("index {index} out of range for a tensor of {len} elements")]
    IndexOutOfRange { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional array, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        debug_assert!(!shape.is_empty() && !shape.contains(&0));
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `[channels, height, width]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(TensorError::Rank {
                expected: 3,
                found: other.len(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        check_same_shape(self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape.len() != b.shape.len() {
        return Err(TensorError::Rank {
            expected: a.shape.len(),
            found: b.shape.len(),
        });
    }
    for (&x, &y) in a.shape.iter().zip(&b.shape) {
        if x != y {
            return Err(TensorError::ShapeMismatch {
                axis: "extent",
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

/// Spatial padding mode for 3×3 (and 1×1) convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so the output keeps the input extent.
    #[default]
    Same,
    /// No padding; each spatial extent shrinks by `k - 1`.
    Valid,
}

impl Padding {
    /// Leading/trailing padding for a kernel extent.
    fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let lead = (k - 1) / 2;
                (lead, k - 1 - lead)
            }
            Padding::Valid => (0, 0),
        }
    }
}

/// Convolution weights `[c_out, c_in, kh, kw]` plus a per-output-channel bias.
///
/// Up-convolutions reuse the same layout with a 2×2 kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let dims = kernel_dims(&weights)?;
        if bias.shape() != [dims.c_out] {
            return Err(TensorError::ShapeMismatch {
                axis: "bias",
                expected: dims.c_out,
                found: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[c_out, c_in, kh, kw]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: Tensor::zeros(self.weights.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct KernelDims {
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
}

fn kernel_dims(weights: &Tensor) -> Result<KernelDims> {
    match weights.shape() {
        &[c_out, c_in, kh, kw] => Ok(KernelDims { c_out, c_in, kh, kw }),
        other => Err(TensorError::Rank {
            expected: 4,
            found: other.len(),
        }),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers.
///
/// `a` is `m × k` after the optional transpose, `b` is `k × n`, `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index dgemm touches for these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &ConvKernel, padding: Padding) -> Result<(Self, KernelDims)> {
        let (c_in, h, w) = input.dims3()?;
        let dims = kernel_dims(&kernel.weights)?;
        if dims.c_in != c_in {
            return Err(TensorError::ShapeMismatch {
                axis: "in_channels",
                expected: dims.c_in,
                found: c_in,
            });
        }
        if kernel.bias.len() != dims.c_out {
            return Err(TensorError::ShapeMismatch {
                axis: "bias",
                expected: dims.c_out,
                found: kernel.bias.len(),
            });
        }
        let padded = |n: usize, k: usize| {
            let (a, b) = padding.amounts(k);
            n + a + b
        };
        if padded(h, dims.kh) < dims.kh {
            return Err(TensorError::TooSmall {
                axis: "height",
                extent: h,
                required: dims.kh,
            });
        }
        if padded(w, dims.kw) < dims.kw {
            return Err(TensorError::TooSmall {
                axis: "width",
                extent: w,
                required: dims.kw,
            });
        }
        let (pad_top, pad_bottom) = padding.amounts(dims.kh);
        let (pad_left, pad_right) = padding.amounts(dims.kw);
        let geom = Self {
            c_in,
            h,
            w,
            kh: dims.kh,
            kw: dims.kw,
            pad_top,
            pad_left,
            out_h: h + pad_top + pad_bottom - dims.kh + 1,
            out_w: w + pad_left + pad_right - dims.kw + 1,
        };
        Ok((geom, dims))
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    /// Output columns `[lo, hi)` for which input column `ox + kx - pad_left` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(kx);
        let hi = (self.w + self.pad_left).saturating_sub(kx).min(self.out_w).max(lo);
        (lo, hi)
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.out_len();
        let mut cols = vec![0.0; self.patch_len() * n];
        for c in 0..self.c_in {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let iy = oy + ky;
                        if iy < self.pad_top || iy - self.pad_top >= self.h {
                            continue;
                        }
                        let src_row = &plane[(iy - self.pad_top) * self.w..];
                        let ix0 = lo + kx - self.pad_left;
                        dst[oy * self.out_w + lo..oy * self.out_w + hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let n = self.out_len();
        for c in 0..self.c_in {
            let plane = &mut grad_input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let iy = oy + ky;
                        if iy < self.pad_top || iy - self.pad_top >= self.h {
                            continue;
                        }
                        let ix0 = lo + kx - self.pad_left;
                        let dst_row = &mut plane[(iy - self.pad_top) * self.w + ix0..];
                        let src_row = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        for (d, s) in dst_row.iter_mut().zip(src_row) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation of a `[c_in, H, W]` input with a `[c_out, c_in, kh, kw]` kernel.
pub fn conv2d_forward(input: &Tensor, kernel: &ConvKernel, padding: Padding) -> Result<Tensor> {
    let (geom, dims) = ConvGeometry::new(input, kernel, padding)?;
    let n = geom.out_len();
    let k = geom.patch_len();
    let mut out = vec![0.0; dims.c_out * n];
    for (o, chunk) in out.chunks_mut(n).enumerate() {
        chunk.fill(kernel.bias.data()[o]);
    }
    if geom.is_pointwise() {
        gemm(
            dims.c_out,
            k,
            n,
            kernel.weights.data(),
            false,
            input.data(),
            false,
            1.0,
            &mut out,
        );
    } else {
        let cols = geom.im2col(input.data());
        gemm(
            dims.c_out,
            k,
            n,
            kernel.weights.data(),
            false,
            &cols,
            false,
            1.0,
            &mut out,
        );
    }
    Tensor::new(vec![dims.c_out, geom.out_h, geom.out_w], out)
}

/// Gradients of `sum(grad_out ⊙ conv2d_forward(input, kernel))` with respect to
/// the input, the weights, and the bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &ConvKernel,
    grad_out: &Tensor,
    padding: Padding,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (geom, dims) = ConvGeometry::new(input, kernel, padding)?;
    let (gc, gh, gw) = grad_out.dims3()?;
    expect_extent("out_channels", dims.c_out, gc)?;
    expect_extent("height", geom.out_h, gh)?;
    expect_extent("width", geom.out_w, gw)?;

    let n = geom.out_len();
    let k = geom.patch_len();
    let g = grad_out.data();

    let grad_bias: Vec<f64> = g.chunks(n).map(|row| row.iter().sum()).collect();

    let mut grad_w = vec![0.0; dims.c_out * k];
    let mut grad_in = vec![0.0; input.len()];
    if geom.is_pointwise() {
        gemm(dims.c_out, n, k, g, false, input.data(), true, 0.0, &mut grad_w);
        gemm(
            k,
            dims.c_out,
            n,
            kernel.weights.data(),
            true,
            g,
            false,
            0.0,
            &mut grad_in,
        );
    } else {
        let cols = geom.im2col(input.data());
        gemm(dims.c_out, n, k, g, false, &cols, true, 0.0, &mut grad_w);
        let mut grad_cols = vec![0.0; k * n];
        gemm(
            k,
            dims.c_out,
            n,
            kernel.weights.data(),
            true,
            g,
            false,
            0.0,
            &mut grad_cols,
        );
        geom.col2im(&grad_cols, &mut grad_in);
    }

    Ok((
        Tensor::new(input.shape().to_vec(), grad_in)?,
        Tensor::new(kernel.weights.shape().to_vec(), grad_w)?,
        Tensor::new(vec![dims.c_out], grad_bias)?,
    ))
}

fn expect_extent(axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(TensorError::ShapeMismatch { axis, expected, found });
    }
    Ok(())
}

/// Flat input positions selected by a 2×2 max pool, one per output cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: [usize; 3],
    pub indices: Vec<usize>,
}

/// Max over disjoint 2×2 windows. Ties go to the first cell in row-major order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 {
        return Err(TensorError::OddExtent {
            axis: "height",
            extent: h,
        });
    }
    if w % 2 != 0 {
        return Err(TensorError::OddExtent {
            axis: "width",
            extent: w,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                indices.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, oh, ow], out)?,
        PoolIndices {
            input_shape: [c, h, w],
            indices,
        },
    ))
}

/// Scatters `grad_out` back to the recorded argmax positions.
pub fn maxpool2x2_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != indices.indices.len() {
        return Err(TensorError::ShapeMismatch {
            axis: "pooled elements",
            expected: indices.indices.len(),
            found: grad_out.len(),
        });
    }
    let len: usize = indices.input_shape.iter().product();
    let mut grad_in = vec![0.0; len];
    for (&idx, &g) in indices.indices.iter().zip(grad_out.data()) {
        let slot = grad_in
            .get_mut(idx)
            .ok_or(TensorError::IndexOutOfRange { index: idx, len })?;
        *slot += g;
    }
    Tensor::new(indices.input_shape.to_vec(), grad_in)
}

fn upconv_dims(input: &Tensor, kernel: &ConvKernel) -> Result<(usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let dims = kernel_dims(&kernel.weights)?;
    expect_extent("in_channels", dims.c_in, c_in)?;
    expect_extent("kernel height", 2, dims.kh)?;
    expect_extent("kernel width", 2, dims.kw)?;
    expect_extent("bias", dims.c_out, kernel.bias.len())?;
    Ok((dims.c_out, c_in, h, w))
}

/// Stride-2 transposed convolution with a 2×2 kernel; doubles both spatial extents.
///
/// `out[o, 2y + a, 2x + b] = bias[o] + Σ_c in[c, y, x] · w[o, c, a, b]`
pub fn upconv2x2_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let (c_out, c_in, h, w) = upconv_dims(input, kernel)?;
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c_out * oh * ow];
    let mut tap_out = vec![0.0; c_out * hw];
    let weights = kernel.weights.data();
    for a in 0..2 {
        for b in 0..2 {
            let tap = a * 2 + b;
            // Weight slice for this tap, strided view [c_out, c_in].
            tap_gemm(c_out, c_in, hw, &weights[tap..], input.data(), &mut tap_out);
            for o in 0..c_out {
                let bias = kernel.bias.data()[o];
                let src = &tap_out[o * hw..(o + 1) * hw];
                let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                for y in 0..h {
                    let row = &mut plane[(2 * y + a) * ow..];
                    for x in 0..w {
                        row[2 * x + b] = src[y * w + x] + bias;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// `out[c_out, n] = W_tap[c_out, c_in] · input[c_in, n]` where `W_tap` is read with
/// strides `(c_in * 4, 4)` from `weights`.
fn tap_gemm(c_out: usize, c_in: usize, n: usize, weights: &[f64], input: &[f64], out: &mut [f64]) {
    assert!(weights.len() > (c_out - 1) * c_in * 4 + (c_in - 1) * 4);
    assert!(input.len() >= c_in * n && out.len() >= c_out * n);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            c_out,
            c_in,
            n,
            1.0,
            weights.as_ptr(),
            (c_in * 4) as isize,
            4,
            input.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients of the up-convolution with respect to input, weights and bias.
pub fn upconv2x2_backward(input: &Tensor, kernel: &ConvKernel, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_out, c_in, h, w) = upconv_dims(input, kernel)?;
    let (gc, gh, gw) = grad_out.dims3()?;
    expect_extent("out_channels", c_out, gc)?;
    expect_extent("height", 2 * h, gh)?;
    expect_extent("width", 2 * w, gw)?;

    let hw = h * w;
    let ow = 2 * w;
    let g = grad_out.data();
    let grad_bias: Vec<f64> = g.chunks(4 * hw).map(|p| p.iter().sum()).collect();

    let mut grad_in = vec![0.0; c_in * hw];
    let mut grad_w = vec![0.0; c_out * c_in * 4];
    let mut tap_grad = vec![0.0; c_out * hw];
    let weights = kernel.weights.data();
    let x = input.data();
    for a in 0..2 {
        for b in 0..2 {
            let tap = a * 2 + b;
            for o in 0..c_out {
                let plane = &g[o * 4 * hw..(o + 1) * 4 * hw];
                let dst = &mut tap_grad[o * hw..(o + 1) * hw];
                for y in 0..h {
                    let row = &plane[(2 * y + a) * ow..];
                    for xx in 0..w {
                        dst[y * w + xx] = row[2 * xx + b];
                    }
                }
            }
            // grad_in[c_in, hw] += W_tap^T · tap_grad
            // grad_w_tap[c_out, c_in] = tap_grad · x^T
            assert!(weights.len() > tap + (c_out - 1) * c_in * 4 + (c_in - 1) * 4);
            // SAFETY: strides stay inside `weights`/`grad_w` per the assert; other
            // buffers are exactly sized.
            unsafe {
                matrixmultiply::dgemm(
                    c_in,
                    c_out,
                    hw,
                    1.0,
                    weights[tap..].as_ptr(),
                    4,
                    (c_in * 4) as isize,
                    tap_grad.as_ptr(),
                    hw as isize,
                    1,
                    1.0,
                    grad_in.as_mut_ptr(),
                    hw as isize,
                    1,
                );
                matrixmultiply::dgemm(
                    c_out,
                    hw,
                    c_in,
                    1.0,
                    tap_grad.as_ptr(),
                    hw as isize,
                    1,
                    x.as_ptr(),
                    1,
                    hw as isize,
                    0.0,
                    grad_w[tap..].as_mut_ptr(),
                    (c_in * 4) as isize,
                    4,
                );
            }
        }
    }
    Ok((
        Tensor::new(vec![c_in, h, w], grad_in)?,
        Tensor::new(vec![c_out, c_in, 2, 2], grad_w)?,
        Tensor::new(vec![c_out], grad_bias)?,
    ))
}

/// Center-crops a `[c, H', W']` tensor to `[c, h, w]`.
///
/// When `H' - h` is odd the extra row comes off the bottom; likewise the extra
/// column comes off the right.
pub fn center_crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = t.dims3()?;
    if th < h {
        return Err(TensorError::TooSmall {
            axis: "height",
            extent: th,
            required: h,
        });
    }
    if tw < w {
        return Err(TensorError::TooSmall {
            axis: "width",
            extent: tw,
            required: w,
        });
    }
    if th == h && tw == w {
        return Ok(t.clone());
    }
    let (top, left) = ((th - h) / 2, (tw - w) / 2);
    let src = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let start = ch * th * tw + (top + y) * tw + left;
            out.extend_from_slice(&src[start..start + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Stacks `a`'s channels followed by the center-cropped channels of `b`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c1, h, w) = a.dims3()?;
    let cropped = center_crop(b, h, w)?;
    let c2 = cropped.shape()[0];
    let mut data = Vec::with_capacity((c1 + c2) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(cropped.data());
    Tensor::new(vec![c1 + c2, h, w], data)
}

/// Splits a concatenation gradient into the part for `a` and the zero-padded part
/// for the uncropped `b` of shape `b_shape`.
pub fn concat_channels_backward(grad: &Tensor, a_channels: usize, b_shape: [usize; 3]) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = grad.dims3()?;
    let [c2, bh, bw] = b_shape;
    expect_extent("channels", a_channels + c2, c)?;
    if bh < h || bw < w {
        return Err(TensorError::TooSmall {
            axis: if bh < h { "height" } else { "width" },
            extent: if bh < h { bh } else { bw },
            required: if bh < h { h } else { w },
        });
    }
    let split = a_channels * h * w;
    let grad_a = Tensor::new(vec![a_channels, h, w], grad.data()[..split].to_vec())?;
    let (top, left) = ((bh - h) / 2, (bw - w) / 2);
    let mut grad_b = vec![0.0; c2 * bh * bw];
    let src = &grad.data()[split..];
    for ch in 0..c2 {
        for y in 0..h {
            let dst = ch * bh * bw + (top + y) * bw + left;
            grad_b[dst..dst + w].copy_from_slice(&src[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    Ok((grad_a, Tensor::new(b_shape.to_vec(), grad_b)?))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its input (or output; the sign test is the same).
/// The derivative at exactly zero is zero.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    check_same_shape(x, grad_out)?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Logistic function, evaluated without overflow for large negative inputs.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// Gradient through the sigmoid given its *output* `s`: `g · s · (1 - s)`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    check_same_shape(output, grad_out)?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}
