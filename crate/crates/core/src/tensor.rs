//! Dense row-major tensors and the handful of kernels the Mamba block needs.
//!
//! Activations are time-major `[T × C]` throughout. All kernels accumulate in
//! f32 and never use fused multiply-add, so results are reproducible across
//! targets.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    /// 4-bit integers stored sign-extended, one per byte.
    I4,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
            DType::I4 => "i4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "i8" => Some(DType::I8),
            "i4" => Some(DType::I4),
            _ => None,
        }
    }

    /// Bytes per element on disk and in memory.
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I8 | DType::I4 => 1,
        }
    }

    /// Largest magnitude an integer dtype may hold (symmetric range).
    pub fn int_max(self) -> Option<i8> {
        match self {
            DType::F32 => None,
            DType::I8 => Some(127),
            DType::I4 => Some(7),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I4(Vec<i8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) | TensorData::I4(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        Self::from_data(shape, TensorData::F32(data))
    }

    pub fn from_data(shape: impl Into<Vec<usize>>, data: TensorData) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        let bound = match &data {
            TensorData::F32(_) => None,
            TensorData::I8(v) => Some((v, 127)),
            TensorData::I4(v) => Some((v, 7)),
        };
        if let Some((v, max)) = bound {
            if let Some(i) = v.iter().position(|&q| q < -max || q > max) {
                return Err(Error::invalid(format!(
                    "integer value {} at index {i} outside symmetric range ±{max}",
                    v[i]
                )));
            }
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: TensorData::F32(vec![0.0; n]),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: TensorData::F32(vec![value; n]),
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new([rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.f32_mut()[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I4(_) => DType::I4,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// The f32 buffer. Panics on integer tensors; use [`Tensor::try_f32`] where
    /// the dtype is not already known.
    pub fn f32(&self) -> &[f32] {
        self.try_f32().expect("f32 tensor")
    }

    pub fn f32_mut(&mut self) -> &mut [f32] {
        match &mut self.data {
            TensorData::F32(v) => v,
            _ => panic!("f32 tensor"),
        }
    }

    pub fn try_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::DType {
                op: "f32 access",
                expected: "f32",
                found: self.dtype().name(),
            }),
        }
    }

    /// Integer payload of an i8 or i4 tensor.
    pub fn ints(&self) -> Result<&[i8]> {
        match &self.data {
            TensorData::I8(v) | TensorData::I4(v) => Ok(v),
            TensorData::F32(_) => Err(Error::DType {
                op: "integer access",
                expected: "i8|i4",
                found: "f32",
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::DType {
                op: "into_f32",
                expected: "f32",
                found: self.dtype().name(),
            }),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::from_data(shape, self.data)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.shape[1];
        &self.f32()[r * c..(r + 1) * c]
    }

    /// Columns `[start, start + len)` of a rank-2 f32 tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if start + len > cols {
            return Err(Error::invalid(format!(
                "column range {start}..{} out of bounds for {cols} columns",
                start + len
            )));
        }
        let src = self.try_f32()?;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Tensor::new([rows, len], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let src = self.try_f32()?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Tensor::new([cols, rows], out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: TensorData::F32(self.f32().iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn abs_max(&self) -> f32 {
        self.f32().iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.try_f32().ok()?.iter().position(|x| !x.is_finite())
    }
}

fn check_f32<'a>(t: &'a Tensor, op: &'static str) -> Result<&'a [f32]> {
    t.try_f32().map_err(|_| Error::DType {
        op,
        expected: "f32",
        found: t.dtype().name(),
    })
}

/// `a [m×k] · b [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let av = check_f32(a, "matmul")?;
    let bv = check_f32(b, "matmul")?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = av[i * k + p];
            let brow = &bv[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new([m, n], out)
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus_scalar(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid_scalar(x)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn exp(x: &Tensor) -> Tensor {
    x.map(f32::exp)
}

pub fn neg(x: &Tensor) -> Tensor {
    x.map(|v| -v)
}

/// Elementwise binary op. `b` may equal `a` in shape, or be a `[C]` vector
/// broadcast over the time axis of a `[T × C]` tensor.
fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let av = check_f32(a, op)?;
    let bv = check_f32(b, op)?;
    let data = if a.shape == b.shape {
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    } else if a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0] {
        let c = b.shape[0];
        av.iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % c]))
            .collect()
    } else {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    };
    Tensor::new(a.shape.clone(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary(a, b, "add", |x, y| x + y)
}

/// Hadamard product, broadcasting a `[C]` vector over time.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary(a, b, "mul", |x, y| x * y)
}

pub const RMSNORM_EPS: f32 = 1e-5;

/// Row-wise RMS normalisation with a learned per-channel scale.
pub fn rmsnorm(x: &Tensor, scale: &Tensor, eps: f32) -> Result<Tensor> {
    let (t, c) = x.dims2()?;
    if scale.shape() != [c] {
        return Err(Error::Shape {
            op: "rmsnorm",
            lhs: x.shape.clone(),
            rhs: scale.shape.clone(),
        });
    }
    let xv = check_f32(x, "rmsnorm")?;
    let sv = check_f32(scale, "rmsnorm")?;
    let mut out = vec![0.0; t * c];
    for r in 0..t {
        let row = &xv[r * c..(r + 1) * c];
        let ms = row.iter().map(|v| v * v).sum::<f32>() / c as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for j in 0..c {
            out[r * c + j] = row[j] * inv * sv[j];
        }
    }
    Tensor::new([t, c], out)
}

/// Depthwise causal convolution of `x [T × C]` with `kernel [K × C]`, left
/// zero-padded so `out[t]` sees only `x[t-K+1..=t]`. Kernel row `K-1` weights
/// the current timestep.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t_len, c) = x.dims2()?;
    let (k, kc) = kernel.dims2()?;
    if kc != c || bias.is_some_and(|b| b.shape() != [c]) {
        return Err(Error::Shape {
            op: "causal_conv1d",
            lhs: x.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    let xv = check_f32(x, "causal_conv1d")?;
    let kv = check_f32(kernel, "causal_conv1d")?;
    let bv = bias.map(|b| b.f32());
    let mut out = vec![0.0; t_len * c];
    for t in 0..t_len {
        for j in 0..k {
            // input index t - (k - 1) + j
            let Some(src) = (t + j).checked_sub(k - 1) else {
                continue;
            };
            for ch in 0..c {
                out[t * c + ch] += kv[j * c + ch] * xv[src * c + ch];
            }
        }
        if let Some(bv) = bv {
            for ch in 0..c {
                out[t * c + ch] += bv[ch];
            }
        }
    }
    Tensor::new([t_len, c], out)
}

/// Per-channel `max_t |x[t, c]|` of a time-major activation.
pub fn channel_absmax(x: &Tensor) -> Result<Tensor> {
    let (t, c) = x.dims2()?;
    if t == 0 {
        return Err(Error::invalid("channel_absmax: empty time axis"));
    }
    let xv = check_f32(x, "channel_absmax")?;
    let mut out = vec![0.0f32; c];
    for row in xv.chunks_exact(c) {
        for (m, &v) in out.iter_mut().zip(row) {
            *m = m.max(v.abs());
        }
    }
    Tensor::new([c], out)
}

/// Concatenate rank-2 tensors with equal row counts along the column axis.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(Ok(0), |p| p.dims2().map(|d| d.0))?;
    let mut total = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        total += c;
    }
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::new([rows, total], out)
}
