//! Turning a [`QuantConfig`] into a quantized model and its activation hooks.
//!
//! Weights: `mlp` quantizes the four projections of every block; `all` adds
//! the conv kernel, embedding and LM head. Biases, `A_log`, `D`, norm scales
//! and smoothing multipliers stay in f32 under both scopes.
//!
//! Activations: static per-tensor fake quantization at the four projection
//! outputs only. The scan output and the discretized `Ā`, `Δ̄`, `B̄` are never
//! quantized; [`check_policy`] enforces this on every hook set built here.

use std::collections::BTreeMap;

use super::config::{AblationScope, QuantConfig, Scope, WeightGranularity};
use crate::error::{Error, Result};
use crate::mamba::{BlockParam, HookOp, HookSet, MambaModel, TapId, TapPoint};
use crate::outlier::{detect_outliers, CalibrationStats, OutlierReport, StatBasis};
use crate::quant::{absmax_scale, dequantize, quantize, Bits, QuantScheme, QuantizedTensor};
use crate::smoothing::{smooth_model, smoothed_stats, SmoothSite, SmoothingFactors};
use crate::tensor::Tensor;

/// A weight tensor the policy may quantize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeightTarget {
    Block(usize, BlockParam),
    Embedding,
    LmHead,
}

/// The projection weights of a block.
pub const PROJECTIONS: [BlockParam; 4] = [
    BlockParam::InProj,
    BlockParam::XProj,
    BlockParam::DtProjWeight,
    BlockParam::OutProj,
];

impl WeightTarget {
    pub fn name(self) -> String {
        match self {
            WeightTarget::Block(i, p) => p.name(i),
            WeightTarget::Embedding => crate::mamba::weights::EMBEDDING.to_string(),
            WeightTarget::LmHead => crate::mamba::weights::LM_HEAD.to_string(),
        }
    }

    /// Axis enumerating output channels for per-channel scales. Projections
    /// and the LM head are `[in × out]`; the conv kernel is `[tap × channel]`;
    /// the embedding has one row per token.
    pub fn channel_axis(self) -> usize {
        match self {
            WeightTarget::Embedding => 0,
            _ => 1,
        }
    }

    pub fn get(self, m: &MambaModel) -> &Tensor {
        match self {
            WeightTarget::Block(i, p) => m.layers[i].param(p),
            WeightTarget::Embedding => &m.embedding,
            WeightTarget::LmHead => &m.lm_head,
        }
    }

    pub fn get_mut(self, m: &mut MambaModel) -> &mut Tensor {
        match self {
            WeightTarget::Block(i, p) => m.layers[i].param_mut(p),
            WeightTarget::Embedding => &mut m.embedding,
            WeightTarget::LmHead => &mut m.lm_head,
        }
    }
}

/// Weights quantized under `scope` for a model with `n_layers` blocks.
pub fn weight_targets(n_layers: usize, scope: Scope) -> Vec<WeightTarget> {
    let mut out = Vec::new();
    for i in 0..n_layers {
        out.extend(PROJECTIONS.iter().map(|&p| WeightTarget::Block(i, p)));
        if scope == Scope::All {
            out.push(WeightTarget::Block(i, BlockParam::ConvKernel));
        }
    }
    if scope == Scope::All {
        out.push(WeightTarget::Embedding);
        out.push(WeightTarget::LmHead);
    }
    out
}

/// Taps that may carry activation fake quantization.
pub const ACTIVATION_TAPS: [TapPoint; 4] = TapPoint::LINEAR_OUTPUTS;

pub fn ablation_taps(scope: AblationScope) -> &'static [TapPoint] {
    match scope {
        AblationScope::In => &[TapPoint::InProjOut],
        AblationScope::All => &TapPoint::LINEAR_OUTPUTS,
    }
}

/// Reject any hook set that fake-quantizes outside the projection outputs.
pub fn check_policy(hooks: &HookSet) -> Result<()> {
    for tap in hooks.quantized_taps() {
        if !ACTIVATION_TAPS.contains(&tap.point) {
            return Err(Error::invalid(format!(
                "quantization policy violation: fake quantization attached to {tap}"
            )));
        }
    }
    Ok(())
}

/// Everything a configuration did to a model.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub config: QuantConfig,
    /// Smoothed, with quantized weights replaced by their dequantized values.
    pub model: MambaModel,
    pub hooks: HookSet,
    /// Integer payloads keyed by canonical tensor name.
    pub weights: BTreeMap<String, QuantizedTensor>,
    pub act_scales: BTreeMap<TapId, f32>,
    pub zeroed: BTreeMap<TapId, Vec<usize>>,
    pub smoothing: Vec<SmoothingFactors>,
    /// Detection results at the projection outputs, when statistics exist.
    pub outliers: Vec<OutlierReport>,
}

/// Per-tensor absmax of a tap ignoring channels that will be zeroed.
fn tap_absmax(stats: &CalibrationStats, tap: TapId, zeroed: Option<&Vec<usize>>) -> Result<f32> {
    let st = stats
        .get(tap)
        .ok_or_else(|| Error::invalid(format!("no calibration statistics for {tap}")))?;
    Ok(st
        .absmax
        .iter()
        .enumerate()
        .filter(|(c, _)| zeroed.is_none_or(|z| !z.contains(c)))
        .fold(0.0f32, |m, (_, &a)| m.max(a)))
}

pub fn build_hooks(
    config: &QuantConfig,
    model: &MambaModel,
    stats: Option<&CalibrationStats>,
) -> Result<QuantizedModel> {
    let config = config.validated()?;
    let stats = match (stats, config.needs_stats()) {
        (Some(s), _) => Some(s),
        (None, false) => None,
        (None, true) => {
            return Err(Error::invalid(format!(
                "configuration {config} needs calibration statistics"
            )))
        }
    };
    let n_layers = model.config.n_layers;

    let (mut model, smoothing, stats) = match (config.smooth_alpha, stats) {
        (Some(alpha), Some(st)) => {
            let (m, f) = smooth_model(model, st, alpha, &SmoothSite::QUANTIZED)?;
            let st = smoothed_stats(st, &f);
            (m, f, Some(st))
        }
        _ => (model.clone(), Vec::new(), stats.cloned()),
    };

    let mut outliers = Vec::new();
    if let Some(st) = &stats {
        for layer in 0..n_layers {
            for point in TapPoint::LINEAR_OUTPUTS {
                let tap = TapId::new(layer, point);
                if let Some(s) = st.get(tap) {
                    outliers.push(detect_outliers(s, config.sigma_mult, StatBasis::ChannelAbsmax)?);
                }
            }
        }
    }

    let mut hooks = HookSet::new();
    let mut zeroed = BTreeMap::new();
    if config.ablate_outliers {
        for layer in 0..n_layers {
            for &point in ablation_taps(config.ablate_scope) {
                let tap = TapId::new(layer, point);
                let report = outliers
                    .iter()
                    .find(|r| r.tap == tap)
                    .ok_or_else(|| Error::invalid(format!("no outlier report for {tap}")))?;
                if !report.outlier_channels.is_empty() {
                    hooks.push(tap, HookOp::ZeroChannels(report.outlier_channels.clone()));
                    zeroed.insert(tap, report.outlier_channels.clone());
                }
            }
        }
    }

    let mut weights = BTreeMap::new();
    if let Some(bits) = config.wbits {
        for target in weight_targets(n_layers, config.scope) {
            let scheme = match config.weights {
                WeightGranularity::PerChannel => QuantScheme::per_channel(bits, target.channel_axis()),
                WeightGranularity::PerTensor => QuantScheme::per_tensor(bits),
            };
            let q = quantize(target.get(&model), scheme)
                .map_err(|e| Error::invalid(format!("{}: {e}", target.name())))?;
            *target.get_mut(&mut model) = dequantize(&q);
            weights.insert(target.name(), q);
        }
    }

    let mut act_scales = BTreeMap::new();
    if let (Some(bits), Some(st)) = (config.abits, &stats) {
        for layer in 0..n_layers {
            for point in ACTIVATION_TAPS {
                let tap = TapId::new(layer, point);
                let scale = absmax_scale(tap_absmax(st, tap, zeroed.get(&tap))?, bits);
                hooks.push(tap, HookOp::FakeQuant { bits, scale: Some(scale) });
                act_scales.insert(tap, scale);
            }
        }
    }
    check_policy(&hooks)?;

    Ok(QuantizedModel {
        config,
        model,
        hooks,
        weights,
        act_scales,
        zeroed,
        smoothing,
        outliers,
    })
}

/// Hooks that fake-quantize the given taps with static scales.
pub fn activation_hooks(act_scales: &BTreeMap<TapId, f32>, bits: Bits) -> HookSet {
    let mut h = HookSet::new();
    for (&tap, &scale) in act_scales {
        h.push(tap, HookOp::FakeQuant { bits, scale: Some(scale) });
    }
    h
}
