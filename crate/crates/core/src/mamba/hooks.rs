//! Named activation tap points and the transforms that attach to them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::quant::{fake_quant, fake_quant_with_scale, Bits, QuantScheme};
use crate::tensor::Tensor;

/// A location inside one Mamba block where activations can be observed or
/// transformed. Every tap carries a time-major `[T × C]` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TapPoint {
    /// RMS-normalised block input, consumed by `in_proj`: `[T × d_model]`.
    NormOut,
    /// Output of the input projection, both branches: `[T × 2·d_inner]`.
    InProjOut,
    /// Causal conv followed by SiLU: `[T × d_inner]`.
    ConvOut,
    /// Output of `x_proj` before splitting into Δ, B, C: `[T × (dt_rank + 2·d_state)]`.
    XProjOut,
    /// Output of `dt_proj` including bias, before softplus: `[T × d_inner]`.
    DtProjOut,
    /// Selective scan output `y`: `[T × d_inner]`.
    SsmOut,
    /// `y ⊙ SiLU(gate)`: `[T × d_inner]`.
    GateOut,
    /// Output of the output projection before the residual add: `[T × d_model]`.
    OutProjOut,
}

impl TapPoint {
    pub const ALL: [TapPoint; 8] = [
        TapPoint::NormOut,
        TapPoint::InProjOut,
        TapPoint::ConvOut,
        TapPoint::XProjOut,
        TapPoint::DtProjOut,
        TapPoint::SsmOut,
        TapPoint::GateOut,
        TapPoint::OutProjOut,
    ];

    /// Outputs of the four projection linears.
    pub const LINEAR_OUTPUTS: [TapPoint; 4] = [
        TapPoint::InProjOut,
        TapPoint::XProjOut,
        TapPoint::DtProjOut,
        TapPoint::OutProjOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TapPoint::NormOut => "norm",
            TapPoint::InProjOut => "in_proj",
            TapPoint::ConvOut => "conv",
            TapPoint::XProjOut => "x_proj",
            TapPoint::DtProjOut => "dt_proj",
            TapPoint::SsmOut => "ssm",
            TapPoint::GateOut => "gate",
            TapPoint::OutProjOut => "out_proj",
        }
    }

    pub fn is_linear_output(self) -> bool {
        Self::LINEAR_OUTPUTS.contains(&self)
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let short = s.strip_prefix("linear_").unwrap_or(s);
        TapPoint::ALL
            .into_iter()
            .find(|t| t.name() == short)
            .or(match short {
                "in" => Some(TapPoint::InProjOut),
                "x" => Some(TapPoint::XProjOut),
                "dt" => Some(TapPoint::DtProjOut),
                "out" => Some(TapPoint::OutProjOut),
                _ => None,
            })
            .ok_or_else(|| Error::UnknownTap(s.to_string()))
    }
}

/// A tap point in a specific layer. Displays as `layers.{i}.{tap}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TapId {
    pub layer: usize,
    pub point: TapPoint,
}

impl TapId {
    pub fn new(layer: usize, point: TapPoint) -> Self {
        Self { layer, point }
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.point.name())
    }
}

impl FromStr for TapId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownTap(s.to_string());
        let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
        let (layer, point) = rest.split_once('.').ok_or_else(bad)?;
        Ok(TapId {
            layer: layer.parse().map_err(|_| bad())?,
            point: point.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for TapId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TapId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One transform at a tap.
#[derive(Debug, Clone, PartialEq)]
pub enum HookOp {
    /// Per-tensor fake quantization. `scale: None` calibrates dynamically on
    /// the activation itself; `Some(s)` uses a static calibrated scale.
    FakeQuant { bits: Bits, scale: Option<f32> },
    /// Set the listed channels to zero.
    ZeroChannels(Vec<usize>),
    /// Multiply each channel by a factor.
    ScaleChannels(Vec<f32>),
    /// Hand the activation to the observer, unchanged.
    Record,
}

impl HookOp {
    pub fn is_fake_quant(&self) -> bool {
        matches!(self, HookOp::FakeQuant { .. })
    }
}

/// Receives activations at `Record` hooks.
pub trait TapObserver {
    fn observe(&mut self, tap: TapId, activation: &Tensor) -> Result<()>;
}

pub struct NoObserver;

impl TapObserver for NoObserver {
    fn observe(&mut self, _: TapId, _: &Tensor) -> Result<()> {
        Ok(())
    }
}

/// Transforms per tap, applied in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookSet {
    hooks: BTreeMap<TapId, Vec<HookOp>>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record every tap of every layer.
    pub fn record_all(n_layers: usize) -> Self {
        let mut h = Self::new();
        for layer in 0..n_layers {
            for point in TapPoint::ALL {
                h.push(TapId::new(layer, point), HookOp::Record);
            }
        }
        h
    }

    pub fn push(&mut self, tap: TapId, op: HookOp) -> &mut Self {
        self.hooks.entry(tap).or_default().push(op);
        self
    }

    /// Append all of `other`'s hooks after this set's own, per tap.
    pub fn extend(&mut self, other: &HookSet) {
        for (tap, ops) in &other.hooks {
            self.hooks.entry(*tap).or_default().extend(ops.iter().cloned());
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.values().all(|v| v.is_empty())
    }

    pub fn ops(&self, tap: TapId) -> &[HookOp] {
        self.hooks.get(&tap).map_or(&[], |v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (TapId, &[HookOp])> {
        self.hooks.iter().map(|(t, v)| (*t, v.as_slice()))
    }

    /// Taps that carry at least one fake-quant transform.
    pub fn quantized_taps(&self) -> Vec<TapId> {
        self.iter()
            .filter(|(_, ops)| ops.iter().any(HookOp::is_fake_quant))
            .map(|(t, _)| t)
            .collect()
    }

    pub fn apply(&self, tap: TapId, x: Tensor, obs: &mut dyn TapObserver) -> Result<Tensor> {
        let ops = self.ops(tap);
        if ops.is_empty() {
            return Ok(x);
        }
        let (_, c) = x.dims2()?;
        let mut x = x;
        for op in ops {
            x = match op {
                HookOp::FakeQuant { bits, scale: None } => {
                    fake_quant(&x, QuantScheme::per_tensor(*bits))?
                }
                HookOp::FakeQuant {
                    bits,
                    scale: Some(s),
                } => fake_quant_with_scale(&x, *bits, *s)?,
                HookOp::ZeroChannels(channels) => {
                    if let Some(&bad) = channels.iter().find(|&&ch| ch >= c) {
                        return Err(Error::invalid(format!(
                            "{tap}: zeroed channel {bad} out of range for {c} channels"
                        )));
                    }
                    let mut x = x;
                    for row in x.f32_mut().chunks_exact_mut(c) {
                        for &ch in channels {
                            row[ch] = 0.0;
                        }
                    }
                    x
                }
                HookOp::ScaleChannels(factors) => {
                    if factors.len() != c {
                        return Err(Error::invalid(format!(
                            "{tap}: {} scale factors for {c} channels",
                            factors.len()
                        )));
                    }
                    let mut x = x;
                    for row in x.f32_mut().chunks_exact_mut(c) {
                        for (v, f) in row.iter_mut().zip(factors) {
                            *v *= f;
                        }
                    }
                    x
                }
                HookOp::Record => {
                    obs.observe(tap, &x)?;
                    x
                }
            };
        }
        Ok(x)
    }
}
