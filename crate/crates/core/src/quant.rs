//! Symmetric absmax quantization.
//!
//! A tensor `x` quantized to `n` bits uses the scale `s = (2^(n-1) - 1) / max|x|`
//! and integer values `round(s · x)`, rounded half-to-even and clamped to the
//! symmetric range `±(2^(n-1) - 1)`. An all-zero tensor gets scale 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, TensorData};

/// Integer bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Bits {
    Int4,
    Int8,
}

impl Bits {
    pub fn qmax(self) -> i32 {
        match self {
            Bits::Int4 => 7,
            Bits::Int8 => 127,
        }
    }

    pub fn count(self) -> u8 {
        match self {
            Bits::Int4 => 4,
            Bits::Int8 => 8,
        }
    }

    pub fn dtype(self) -> DType {
        match self {
            Bits::Int4 => DType::I4,
            Bits::Int8 => DType::I8,
        }
    }

    pub fn from_dtype(dtype: DType) -> Option<Self> {
        match dtype {
            DType::I4 => Some(Bits::Int4),
            DType::I8 => Some(Bits::Int8),
            DType::F32 => None,
        }
    }
}

impl TryFrom<u8> for Bits {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Bits::Int4),
            8 => Ok(Bits::Int8),
            other => Err(Error::invalid(format!(
                "unsupported bit width {other}; expected 4 or 8"
            ))),
        }
    }
}

impl From<Bits> for u8 {
    fn from(b: Bits) -> u8 {
        b.count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    /// One scale per index along `axis`.
    PerChannel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantScheme {
    pub bits: Bits,
    pub granularity: Granularity,
}

impl QuantScheme {
    pub fn per_tensor(bits: Bits) -> Self {
        Self {
            bits,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn per_channel(bits: Bits, axis: usize) -> Self {
        Self {
            bits,
            granularity: Granularity::PerChannel(axis),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Tensor,
    pub scales: Vec<f32>,
    pub scheme: QuantScheme,
}

/// Absmax scale for a given magnitude; degenerate zero absmax maps to 1.
pub fn absmax_scale(absmax: f32, bits: Bits) -> f32 {
    if absmax > 0.0 {
        bits.qmax() as f32 / absmax
    } else {
        1.0
    }
}

fn quantize_value(x: f32, scale: f32, qmax: i32) -> i8 {
    let q = (scale * x).round_ties_even();
    q.clamp(-(qmax as f32), qmax as f32) as i8
}

fn check_finite(x: &Tensor) -> Result<&[f32]> {
    let v = x.try_f32()?;
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "quantization input",
            index,
        });
    }
    Ok(v)
}

/// Channel index of each flat element for a per-channel scheme along `axis`.
fn channel_layout(shape: &[usize], axis: usize) -> Result<(usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "per-channel axis {axis} invalid for tensor of rank {}",
            shape.len()
        )));
    }
    let stride = shape[axis + 1..].iter().product();
    Ok((shape[axis], stride))
}

fn int_tensor(shape: &[usize], values: Vec<i8>, bits: Bits) -> Tensor {
    let data = match bits {
        Bits::Int4 => TensorData::I4(values),
        Bits::Int8 => TensorData::I8(values),
    };
    Tensor::from_data(shape.to_vec(), data).expect("quantized values lie in range")
}

pub fn quantize(x: &Tensor, scheme: QuantScheme) -> Result<QuantizedTensor> {
    let v = check_finite(x)?;
    let qmax = scheme.bits.qmax();
    let (values, scales) = match scheme.granularity {
        Granularity::PerTensor => {
            let absmax = v.iter().fold(0.0f32, |m, &a| m.max(a.abs()));
            let s = absmax_scale(absmax, scheme.bits);
            (v.iter().map(|&a| quantize_value(a, s, qmax)).collect(), vec![s])
        }
        Granularity::PerChannel(axis) => {
            let (channels, stride) = channel_layout(x.shape(), axis)?;
            let chan = |i: usize| (i / stride) % channels;
            let mut absmax = vec![0.0f32; channels];
            for (i, &a) in v.iter().enumerate() {
                let m = &mut absmax[chan(i)];
                *m = m.max(a.abs());
            }
            let scales: Vec<f32> = absmax.iter().map(|&m| absmax_scale(m, scheme.bits)).collect();
            let values = v
                .iter()
                .enumerate()
                .map(|(i, &a)| quantize_value(a, scales[chan(i)], qmax))
                .collect();
            (values, scales)
        }
    };
    Ok(QuantizedTensor {
        values: int_tensor(x.shape(), values, scheme.bits),
        scales,
        scheme,
    })
}

pub fn quantize_per_tensor(x: &Tensor, bits: Bits) -> Result<QuantizedTensor> {
    quantize(x, QuantScheme::per_tensor(bits))
}

/// Row-wise quantization of a rank-2 `[out × in]` weight, one scale per row.
pub fn quantize_per_channel(w: &Tensor, bits: Bits) -> Result<QuantizedTensor> {
    w.dims2()?;
    quantize(w, QuantScheme::per_channel(bits, 0))
}

/// Quantize with a fixed, externally calibrated scale. Values beyond the
/// calibrated range saturate.
pub fn quantize_with_scale(x: &Tensor, bits: Bits, scale: f32) -> Result<QuantizedTensor> {
    let v = check_finite(x)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("quantization scale {scale} must be positive")));
    }
    let qmax = bits.qmax();
    let values = v.iter().map(|&a| quantize_value(a, scale, qmax)).collect();
    Ok(QuantizedTensor {
        values: int_tensor(x.shape(), values, bits),
        scales: vec![scale],
        scheme: QuantScheme::per_tensor(bits),
    })
}

impl QuantizedTensor {
    /// Rebuild from an integer payload and its scales, validating consistency.
    pub fn from_parts(values: Tensor, scales: Vec<f32>, granularity: Granularity) -> Result<Self> {
        let bits = Bits::from_dtype(values.dtype()).ok_or(Error::DType {
            op: "QuantizedTensor::from_parts",
            expected: "i8|i4",
            found: "f32",
        })?;
        let expected = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel(axis) => channel_layout(values.shape(), axis)?.0,
        };
        if scales.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} scales, found {}",
                scales.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("quantization scale {s} must be positive")));
        }
        Ok(Self {
            values,
            scales,
            scheme: QuantScheme { bits, granularity },
        })
    }

    fn scale_of(&self, i: usize) -> f32 {
        match self.scheme.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel(axis) => {
                let shape = self.values.shape();
                let stride: usize = shape[axis + 1..].iter().product();
                self.scales[(i / stride) % shape[axis]]
            }
        }
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let ints = q.values.ints().expect("quantized payload is integer");
    let data = ints
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f32 / q.scale_of(i))
        .collect();
    Tensor::new(q.values.shape().to_vec(), data).expect("shape preserved")
}

/// Quantize-then-dequantize.
pub fn fake_quant(x: &Tensor, scheme: QuantScheme) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, scheme)?))
}

pub fn fake_quant_with_scale(x: &Tensor, bits: Bits, scale: f32) -> Result<Tensor> {
    Ok(dequantize(&quantize_with_scale(x, bits, scale)?))
}

/// Largest inner dimension for which an i32 accumulator of i8 products cannot
/// overflow (127² · 2^15 < 2^31).
pub const MAX_INT_MATMUL_K: usize = 1 << 15;

/// Integer matmul of a per-tensor quantized activation `[m × k]` with a
/// weight `[k × n]` quantized per tensor or per output column (axis 1).
/// Products accumulate in i32 and are rescaled by `1 / (s_x · s_w[j])`.
pub fn int_matmul(xq: &QuantizedTensor, wq: &QuantizedTensor) -> Result<Tensor> {
    let (m, k) = xq.values.dims2()?;
    let (k2, n) = wq.values.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "int_matmul",
            lhs: xq.values.shape().to_vec(),
            rhs: wq.values.shape().to_vec(),
        });
    }
    if k > MAX_INT_MATMUL_K {
        return Err(Error::AccumulatorOverflow {
            k,
            max: MAX_INT_MATMUL_K,
        });
    }
    if xq.scheme.granularity != Granularity::PerTensor {
        return Err(Error::invalid("int_matmul: activation must be quantized per tensor"));
    }
    let w_scales: Vec<f32> = match wq.scheme.granularity {
        Granularity::PerTensor => vec![wq.scales[0]; n],
        Granularity::PerChannel(1) => wq.scales.clone(),
        Granularity::PerChannel(axis) => {
            return Err(Error::invalid(format!(
                "int_matmul: weight must be per-tensor or per-channel along the output axis, got axis {axis}"
            )))
        }
    };
    let xs = xq.scales[0];
    let xv = xq.values.ints()?;
    let wv = wq.values.ints()?;
    let mut acc = vec![0i32; n];
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        acc.fill(0);
        for p in 0..k {
            let a = xv[i * k + p] as i32;
            if a == 0 {
                continue;
            }
            for (o, &b) in acc.iter_mut().zip(&wv[p * n..(p + 1) * n]) {
                *o += a * b as i32;
            }
        }
        out.extend(acc.iter().zip(&w_scales).map(|(&a, &ws)| a as f32 / (xs * ws)));
    }
    Tensor::new([m, n], out)
}
