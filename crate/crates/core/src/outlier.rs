//! Calibration statistics, outlier-channel detection and the zeroing ablation.
//!
//! A channel is an outlier when its absolute-maximum activation exceeds the
//! mean of the per-channel absmax vector by more than `sigma_mult` population
//! standard deviations (strict inequality).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::{HookOp, HookSet, TapId, TapObserver};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA_MULT: f32 = 6.0;

/// Mergeable per-channel statistics of one tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub tap: TapId,
    pub n_channels: usize,
    /// Number of timesteps observed; identical for every channel.
    pub count: u64,
    pub absmax: Vec<f32>,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl ChannelStats {
    pub fn empty(tap: TapId, n_channels: usize) -> Self {
        Self {
            tap,
            n_channels,
            count: 0,
            absmax: vec![0.0; n_channels],
            sum: vec![0.0; n_channels],
            sum_sq: vec![0.0; n_channels],
        }
    }

    pub fn record(&mut self, activation: &Tensor) -> Result<()> {
        let (t, c) = activation.dims2()?;
        if c != self.n_channels {
            return Err(Error::invalid(format!(
                "{}: activation has {c} channels, stats track {}",
                self.tap, self.n_channels
            )));
        }
        for row in activation.try_f32()?.chunks_exact(c) {
            for (j, &v) in row.iter().enumerate() {
                self.absmax[j] = self.absmax[j].max(v.abs());
                self.sum[j] += v as f64;
                self.sum_sq[j] += v as f64 * v as f64;
            }
        }
        self.count += t as u64;
        Ok(())
    }

    pub fn merge(&self, other: &ChannelStats) -> Result<ChannelStats> {
        if self.tap != other.tap || self.n_channels != other.n_channels {
            return Err(Error::invalid(format!(
                "cannot merge stats of {} ({} channels) with {} ({} channels)",
                self.tap, self.n_channels, other.tap, other.n_channels
            )));
        }
        let zip_sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Ok(ChannelStats {
            tap: self.tap,
            n_channels: self.n_channels,
            count: self.count + other.count,
            absmax: self
                .absmax
                .iter()
                .zip(&other.absmax)
                .map(|(a, b)| a.max(*b))
                .collect(),
            sum: zip_sum(&self.sum, &other.sum),
            sum_sq: zip_sum(&self.sum_sq, &other.sum_sq),
        })
    }

    pub fn mean(&self, channel: usize) -> f64 {
        self.sum[channel] / self.count as f64
    }

    pub fn variance(&self, channel: usize) -> f64 {
        let m = self.mean(channel);
        self.sum_sq[channel] / self.count as f64 - m * m
    }

    /// Largest absolute value seen on any channel.
    pub fn tensor_absmax(&self) -> f32 {
        self.absmax.iter().fold(0.0f32, |m, &a| m.max(a))
    }
}

/// Statistics for every recorded tap. Records through [`TapObserver`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub taps: BTreeMap<TapId, ChannelStats>,
}

impl TapObserver for CalibrationStats {
    fn observe(&mut self, tap: TapId, activation: &Tensor) -> Result<()> {
        let (_, c) = activation.dims2()?;
        self.taps
            .entry(tap)
            .or_insert_with(|| ChannelStats::empty(tap, c))
            .record(activation)
    }
}

impl CalibrationStats {
    pub fn get(&self, tap: TapId) -> Option<&ChannelStats> {
        self.taps.get(&tap)
    }

    /// Tap-wise merge; taps present on only one side are carried over.
    pub fn merge(&self, other: &CalibrationStats) -> Result<CalibrationStats> {
        let mut taps = self.taps.clone();
        for (tap, s) in &other.taps {
            let merged = match taps.get(tap) {
                Some(mine) => mine.merge(s)?,
                None => s.clone(),
            };
            taps.insert(*tap, merged);
        }
        Ok(CalibrationStats { taps })
    }

    pub fn to_json(&self) -> String {
        let list: Vec<&ChannelStats> = self.taps.values().collect();
        let mut s = serde_json::to_string_pretty(&serde_json::json!({ "taps": list }))
            .expect("stats serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            taps: Vec<ChannelStats>,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|cause| Error::Json {
            path: path.to_path_buf(),
            cause,
        })?;
        let mut taps = BTreeMap::new();
        for s in doc.taps {
            if s.absmax.len() != s.n_channels || s.sum.len() != s.n_channels || s.sum_sq.len() != s.n_channels {
                return Err(Error::invalid(format!(
                    "{}: stats for {} have inconsistent channel counts",
                    path.display(),
                    s.tap
                )));
            }
            if taps.insert(s.tap, s.clone()).is_some() {
                return Err(Error::invalid(format!(
                    "{}: duplicate stats for {}",
                    path.display(),
                    s.tap
                )));
            }
        }
        Ok(Self { taps })
    }
}

/// What μ and σ are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatBasis {
    /// Distribution of the per-channel absmax values.
    #[default]
    ChannelAbsmax,
    /// Distribution of every activation scalar at the tap, pooled over channels.
    Activations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub tap: TapId,
    pub mu: f64,
    pub sigma: f64,
    pub threshold: f64,
    pub outlier_channels: Vec<usize>,
    pub fraction: f64,
    pub channel_absmax: Vec<f32>,
}

pub fn detect_outliers(stats: &ChannelStats, sigma_mult: f32, basis: StatBasis) -> Result<OutlierReport> {
    let n = stats.n_channels;
    if n < 2 {
        return Err(Error::invalid(format!(
            "{}: outlier detection needs at least 2 channels, got {n}",
            stats.tap
        )));
    }
    if stats.count == 0 {
        return Err(Error::invalid(format!("{}: no calibration samples", stats.tap)));
    }
    let (mu, var) = match basis {
        StatBasis::ChannelAbsmax => {
            let mu = stats.absmax.iter().map(|&a| a as f64).sum::<f64>() / n as f64;
            let var = stats
                .absmax
                .iter()
                .map(|&a| (a as f64 - mu).powi(2))
                .sum::<f64>()
                / n as f64;
            (mu, var)
        }
        StatBasis::Activations => {
            let total = stats.count as f64 * n as f64;
            let mu = stats.sum.iter().sum::<f64>() / total;
            let var = stats.sum_sq.iter().sum::<f64>() / total - mu * mu;
            (mu, var)
        }
    };
    let sigma = var.max(0.0).sqrt();
    let threshold = mu + sigma_mult as f64 * sigma;
    let outlier_channels: Vec<usize> = (0..n)
        .filter(|&c| stats.absmax[c] as f64 > threshold)
        .collect();
    Ok(OutlierReport {
        tap: stats.tap,
        mu,
        sigma,
        threshold,
        fraction: outlier_channels.len() as f64 / n as f64,
        outlier_channels,
        channel_absmax: stats.absmax.clone(),
    })
}

/// Outlier reports for every tap with at least two channels.
pub fn detect_all(stats: &CalibrationStats, sigma_mult: f32, basis: StatBasis) -> Result<Vec<OutlierReport>> {
    stats
        .taps
        .values()
        .filter(|s| s.n_channels >= 2 && s.count > 0)
        .map(|s| detect_outliers(s, sigma_mult, basis))
        .collect()
}

/// Hooks that zero the outlier channels of each scoped tap.
pub fn zero_outlier_hook(reports: &[OutlierReport], scope: &[TapId]) -> Result<HookSet> {
    let mut hooks = HookSet::new();
    for tap in scope {
        let report = reports
            .iter()
            .find(|r| r.tap == *tap)
            .ok_or_else(|| Error::UnknownTap(tap.to_string()))?;
        if !report.outlier_channels.is_empty() {
            hooks.push(*tap, HookOp::ZeroChannels(report.outlier_channels.clone()));
        }
    }
    Ok(hooks)
}
