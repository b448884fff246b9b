//! Experiment cells, the configuration grid, and the zeroing ablation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AblationScope, QuantConfig};
use super::corpus::Corpus;
use super::fidelity::{calibrate, evaluate_against, Baseline, LayerMetrics, Metrics};
use super::policy::{ablation_taps, build_hooks};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mamba::{HookOp, HookSet, MambaModel, TapId};
use crate::outlier::{CalibrationStats, OutlierReport};
use crate::smoothing::SmoothingFactors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSummary {
    pub sigma_mult: f32,
    /// Outlier channels per projection-output tap; taps without outliers
    /// are omitted.
    pub taps: BTreeMap<TapId, Vec<usize>>,
}

impl OutlierSummary {
    pub fn from_reports(sigma_mult: f32, reports: &[OutlierReport]) -> Self {
        Self {
            sigma_mult,
            taps: reports
                .iter()
                .filter(|r| !r.outlier_channels.is_empty())
                .map(|r| (r.tap, r.outlier_channels.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    #[serde(flatten)]
    pub config: QuantConfig,
    pub metrics: Metrics,
    pub per_layer: Vec<LayerMetrics>,
    pub outliers: Option<OutlierSummary>,
    pub smoothing: Vec<SmoothingFactors>,
    /// Wall time of the cell; only filled when timing is requested, so
    /// reports stay byte-identical across runs by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

/// Build and evaluate one configuration against a shared baseline.
pub fn evaluate_config(
    model: &MambaModel,
    baseline: &Baseline,
    stats: Option<&CalibrationStats>,
    config: &QuantConfig,
    exec: Execution,
    timing: bool,
) -> Result<FidelityReport> {
    let start = Instant::now();
    let q = build_hooks(config, model, stats)
        .map_err(|e| Error::invalid(format!("config {config}: {e}")))?;
    let fid = evaluate_against(baseline, &q.model, &q.hooks, exec)
        .map_err(|e| Error::invalid(format!("config {config}: {e}")))?;
    Ok(FidelityReport {
        config: q.config,
        metrics: fid.metrics,
        per_layer: fid.per_layer,
        outliers: stats.map(|_| OutlierSummary::from_reports(q.config.sigma_mult, &q.outliers)),
        smoothing: q.smoothing,
        runtime_ms: timing.then(|| start.elapsed().as_secs_f64() * 1e3),
    })
}

/// Evaluate every configuration against one float baseline. Statistics are
/// collected once on `calib`; cells run through `exec` and come back in input
/// order.
pub fn run_grid(
    model: &MambaModel,
    calib: &Corpus,
    eval: &Corpus,
    configs: &[QuantConfig],
    exec: Execution,
    timing: bool,
) -> Result<Vec<FidelityReport>> {
    if configs.is_empty() {
        return Ok(Vec::new());
    }
    let stats = if configs.iter().any(QuantConfig::needs_stats) {
        Some(calibrate(model, calib, exec)?)
    } else {
        None
    };
    let baseline = Baseline::compute(model, eval, exec)?;
    exec.try_map(configs, |c| {
        evaluate_config(model, &baseline, stats.as_ref(), c, Execution::Sequential, timing)
    })
}

pub fn reports_to_json(reports: &[FidelityReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub scope: AblationScope,
    pub seed: u64,
    /// Channels zeroed per tap, identical in both arms.
    pub n_zeroed: usize,
    pub outlier_channels: BTreeMap<TapId, Vec<usize>>,
    pub random_channels: BTreeMap<TapId, Vec<usize>>,
    pub outlier: Metrics,
    pub random: Metrics,
    /// `random.top1_agreement - outlier.top1_agreement`; positive when
    /// removing outliers hurts more than removing random channels.
    pub top1_delta: f64,
}

/// Zero detected outlier channels at the scoped taps, and separately an equal
/// number of random non-outlier channels per tap, and compare both against the
/// float baseline.
pub fn ablation_experiment(
    model: &MambaModel,
    baseline: &Baseline,
    reports: &[OutlierReport],
    scope: AblationScope,
    seed: u64,
    exec: Execution,
) -> Result<AblationResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outlier_channels = BTreeMap::new();
    let mut random_channels = BTreeMap::new();
    let (mut outlier_hooks, mut random_hooks) = (HookSet::new(), HookSet::new());
    for layer in 0..model.config.n_layers {
        for &point in ablation_taps(scope) {
            let tap = TapId::new(layer, point);
            let r = reports
                .iter()
                .find(|r| r.tap == tap)
                .ok_or_else(|| Error::UnknownTap(tap.to_string()))?;
            if r.outlier_channels.is_empty() {
                continue;
            }
            let pool: Vec<usize> = (0..r.channel_absmax.len())
                .filter(|c| !r.outlier_channels.contains(c))
                .collect();
            let k = r.outlier_channels.len();
            if k > pool.len() {
                return Err(Error::invalid(format!(
                    "{tap}: {k} outliers but only {} other channels to sample",
                    pool.len()
                )));
            }
            let mut picked: Vec<usize> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            outlier_hooks.push(tap, HookOp::ZeroChannels(r.outlier_channels.clone()));
            random_hooks.push(tap, HookOp::ZeroChannels(picked.clone()));
            outlier_channels.insert(tap, r.outlier_channels.clone());
            random_channels.insert(tap, picked);
        }
    }
    let outlier = evaluate_against(baseline, model, &outlier_hooks, exec)?.metrics;
    let random = evaluate_against(baseline, model, &random_hooks, exec)?.metrics;
    Ok(AblationResult {
        scope,
        seed,
        n_zeroed: outlier_channels.values().map(Vec::len).sum(),
        outlier_channels,
        random_channels,
        top1_delta: random.top1_agreement - outlier.top1_agreement,
        outlier,
        random,
    })
}
