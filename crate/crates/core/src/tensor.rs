//! Dense row-major `f64` tensors and the numeric kernels shared by the tape.
//!
//! Kernels here are plain functions over slices; [`crate::graph::Graph`]
//! wraps them with gradient bookkeeping. The eager helpers on [`Tensor`]
//! call the same kernels, so a value computed eagerly and one computed on a
//! tape are bit-identical.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a single element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows/cols view for a tensor of rank >= 1: all leading dims are folded
    /// into rows.
    pub fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape.split_last() {
            Some((&n, lead)) => Ok((lead.iter().product(), n)),
            None => Err(Error::Shape("scalar has no rows".into())),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Tensor::new([m, n], out)
    }

    pub fn conv2d(&self, kernel: &Tensor, stride: (usize, usize), padding: (usize, usize)) -> Result<Tensor> {
        let geom = ConvGeometry::new(self.shape(), kernel.shape(), stride, padding)?;
        let mut cols = vec![0.0; geom.col_rows() * geom.out_spatial()];
        im2col(&geom, &self.data, &mut cols);
        let mut out = vec![0.0; geom.c_out * geom.out_spatial()];
        conv_forward(&geom, &kernel.data, &cols, &mut out);
        Tensor::new([geom.c_out, geom.h_out, geom.w_out], out)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, n) = self.rows_cols()?;
        if n == 0 {
            return Err(Error::Shape("softmax over an empty dimension".into()));
        }
        let mut out = self.data.clone();
        for r in 0..rows {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, n) = self.rows_cols()?;
        if gain.len() != n || bias.len() != n {
            return Err(Error::Shape(format!(
                "layer norm over {n} features with gain {:?} / bias {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let mut out = vec![0.0; self.len()];
        let mut xhat = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; rows];
        layer_norm_forward(&self.data, rows, n, &gain.data, &bias.data, eps, &mut xhat, &mut inv_std, &mut out);
        Tensor::new(self.shape.clone(), out)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        _ => Err(Error::Shape(format!("cannot multiply {a:?} by {b:?}"))),
    }
}

/// `c (+)= op(a) * op(b)` with `op(a)` being `m x k` and `op(b)` being `k x n`.
/// When a transpose flag is set, the operand is stored as its transpose
/// (`k x m` or `n x k`) in row-major order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the extents described by the dims and
    // strides above (checked in debug builds), and `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: (usize, usize), pad: (usize, usize)) -> Result<Self> {
        let (&[c_in, h_in, w_in], &[c_out, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::Shape(format!(
                "conv2d expects [C,H,W] input and [Co,Ci,kh,kw] kernel, got {input:?} and {kernel:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (h_in + 2 * pad.0, w_in + 2 * pad.1);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeometry {
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (ph - kh) / stride.0 + 1,
            w_out: (pw - kw) / stride.1 + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1, stride-1, unpadded convolution reads the input directly as its
    /// column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

pub(crate) fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let spatial = g.out_spatial();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h_in as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                        *v = if ix < 0 || ix >= g.w_in as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], input_grad: &mut [f64]) {
    let spatial = g.out_spatial();
    for ci in 0..g.c_in {
        let plane = &mut input_grad[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                        if ix >= 0 && (ix as usize) < g.w_in {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeometry, kernel: &[f64], cols: &[f64], out: &mut [f64]) {
    gemm(g.c_out, g.col_rows(), g.out_spatial(), kernel, false, cols, false, out, false);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Normalizes each of `rows` rows of length `n`, writing the pre-affine values
/// to `xhat` and the per-row `1/sqrt(var + eps)` to `inv_std`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_forward(
    x: &[f64],
    rows: usize,
    n: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    xhat: &mut [f64],
    inv_std: &mut [f64],
    out: &mut [f64],
) {
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let (mean, var) = mean_var(row);
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..n {
            let h = (row[j] - mean) * is;
            xhat[r * n + j] = h;
            out[r * n + j] = gain[j] * h + bias[j];
        }
    }
}

/// Mean and population variance.
pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}
