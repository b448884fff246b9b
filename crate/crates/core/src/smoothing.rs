//! SmoothQuant-style migration of activation range into the weights.
//!
//! For an activation `X` consumed by a weight `W`, per-channel factors `s`
//! rewrite `XW` as `(X diag(s)⁻¹)(diag(s) W)`. The consumer absorbs
//! `diag(s)`; the inverse goes into whatever produced `X`.
//!
//! | site       | smoothed activation       | consumer (× s)        | producer (÷ s)               |
//! |------------|---------------------------|-----------------------|------------------------------|
//! | `in_proj`  | normed block input        | `in_proj` rows        | RMSNorm scale                |
//! | `conv`     | x-branch of `in_proj`     | conv kernel channels  | `in_proj` x-branch columns   |
//! | `x_proj`   | conv output               | `x_proj` rows         | explicit input multiplier    |
//! | `dt_proj`  | low-rank Δ of `x_proj`    | `dt_proj` rows        | `x_proj` Δ columns           |
//! | `out_proj` | gated scan output         | `out_proj` rows       | explicit input multiplier    |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::{MambaBlockWeights, MambaModel, ModelConfig, TapId, TapPoint};
use crate::outlier::CalibrationStats;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothSite {
    InProj,
    #[serde(rename = "conv")]
    ConvIn,
    XProj,
    DtProj,
    OutProj,
}

impl SmoothSite {
    pub const ALL: [SmoothSite; 5] = [
        SmoothSite::InProj,
        SmoothSite::ConvIn,
        SmoothSite::XProj,
        SmoothSite::DtProj,
        SmoothSite::OutProj,
    ];

    /// Sites whose smoothed activation is one of the fake-quantized taps.
    pub const QUANTIZED: [SmoothSite; 2] = [SmoothSite::ConvIn, SmoothSite::DtProj];

    pub fn name(self) -> &'static str {
        match self {
            SmoothSite::InProj => "in_proj",
            SmoothSite::ConvIn => "conv",
            SmoothSite::XProj => "x_proj",
            SmoothSite::DtProj => "dt_proj",
            SmoothSite::OutProj => "out_proj",
        }
    }

    /// Tap whose leading channels carry the activation this site smooths.
    pub fn tap(self) -> TapPoint {
        match self {
            SmoothSite::InProj => TapPoint::NormOut,
            SmoothSite::ConvIn => TapPoint::InProjOut,
            SmoothSite::XProj => TapPoint::ConvOut,
            SmoothSite::DtProj => TapPoint::XProjOut,
            SmoothSite::OutProj => TapPoint::GateOut,
        }
    }

    /// The site smoothing the activation observed at `tap`. Fails for taps
    /// whose producer cannot absorb an inverse scale.
    pub fn for_tap(tap: TapPoint) -> Result<Self> {
        SmoothSite::ALL
            .into_iter()
            .find(|s| s.tap() == tap)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "tap {:?} cannot be smoothed: its consumer is not a linear layer",
                    tap.name()
                ))
            })
    }

    /// Number of smoothed channels, counted from channel 0 of [`Self::tap`].
    pub fn width(self, c: &ModelConfig) -> usize {
        match self {
            SmoothSite::InProj => c.d_model,
            SmoothSite::DtProj => c.dt_rank,
            SmoothSite::ConvIn | SmoothSite::XProj | SmoothSite::OutProj => c.d_inner,
        }
    }

    /// Whether the tap sees the activation after the inverse scale. The
    /// explicit multipliers of `x_proj` and `out_proj` sit after their taps.
    pub fn tap_sees_smoothed(self) -> bool {
        !matches!(self, SmoothSite::XProj | SmoothSite::OutProj)
    }
}

impl fmt::Display for SmoothSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SmoothSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(site) = SmoothSite::ALL.into_iter().find(|x| x.name() == s) {
            return Ok(site);
        }
        SmoothSite::for_tap(s.parse()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingFactors {
    /// Tap carrying the smoothed activation.
    pub tap: TapId,
    pub site: SmoothSite,
    pub alpha: f32,
    pub s: Vec<f32>,
}

/// `s_j = a_j^α / w_j^(1-α)`; any factor that comes out zero or non-finite
/// is replaced by 1.
pub fn compute_smoothing(act_absmax: &[f32], w_absmax: &[f32], alpha: f32) -> Result<Vec<f32>> {
    if act_absmax.len() != w_absmax.len() {
        return Err(Error::invalid(format!(
            "smoothing: {} activation channels vs {} weight channels",
            act_absmax.len(),
            w_absmax.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("smoothing: alpha {alpha} outside [0, 1]")));
    }
    if let Some(bad) = act_absmax.iter().chain(w_absmax).find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::invalid(format!("smoothing: absmax {bad} must be non-negative")));
    }
    let a = alpha as f64;
    Ok(act_absmax
        .iter()
        .zip(w_absmax)
        .map(|(&x, &w)| {
            let s = ((x as f64).powf(a) / (w as f64).powf(1.0 - a)) as f32;
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect())
}

fn row_absmax(w: &Tensor, rows: usize) -> Vec<f32> {
    let (_, n) = w.dims2().expect("rank-2 weight");
    w.f32()
        .chunks_exact(n)
        .take(rows)
        .map(|r| r.iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect()
}

/// Absmax of the consuming weight for each smoothed input channel.
pub fn weight_absmax(w: &MambaBlockWeights, site: SmoothSite) -> Vec<f32> {
    match site {
        SmoothSite::InProj => row_absmax(&w.in_proj, usize::MAX),
        SmoothSite::ConvIn => {
            let (_, c) = w.conv_kernel.dims2().expect("rank-2 kernel");
            let mut m = vec![0.0f32; c];
            for row in w.conv_kernel.f32().chunks_exact(c) {
                for (a, v) in m.iter_mut().zip(row) {
                    *a = a.max(v.abs());
                }
            }
            m
        }
        SmoothSite::XProj => row_absmax(&w.x_proj, usize::MAX),
        SmoothSite::DtProj => row_absmax(&w.dt_proj_weight, usize::MAX),
        SmoothSite::OutProj => row_absmax(&w.out_proj, usize::MAX),
    }
}

/// Calibrated activation absmax of the channels a site smooths.
pub fn activation_absmax(stats: &CalibrationStats, layer: usize, site: SmoothSite, c: &ModelConfig) -> Result<Vec<f32>> {
    let tap = TapId::new(layer, site.tap());
    let st = stats
        .get(tap)
        .ok_or_else(|| Error::invalid(format!("no calibration statistics for {tap}")))?;
    let width = site.width(c);
    if st.n_channels < width {
        return Err(Error::invalid(format!(
            "{tap}: statistics have {} channels, smoothing needs {width}",
            st.n_channels
        )));
    }
    Ok(st.absmax[..width].to_vec())
}

fn scale_rows(w: &mut Tensor, s: &[f32]) {
    let (_, n) = w.dims2().expect("rank-2 weight");
    for (row, &f) in w.f32_mut().chunks_exact_mut(n).zip(s) {
        row.iter_mut().for_each(|v| *v *= f);
    }
}

fn divide_cols(w: &mut Tensor, s: &[f32]) {
    let (_, n) = w.dims2().expect("rank-2 weight");
    for row in w.f32_mut().chunks_exact_mut(n) {
        for (v, &f) in row.iter_mut().zip(s) {
            *v /= f;
        }
    }
}

fn divide_multiplier(m: &mut Option<Tensor>, s: &[f32]) {
    let mut t = m.take().unwrap_or_else(|| Tensor::full([s.len()], 1.0));
    t.f32_mut().iter_mut().zip(s).for_each(|(v, &f)| *v /= f);
    *m = Some(t);
}

fn fold(w: &mut MambaBlockWeights, site: SmoothSite, s: &[f32]) {
    match site {
        SmoothSite::InProj => {
            w.norm_scale.f32_mut().iter_mut().zip(s).for_each(|(v, &f)| *v /= f);
            scale_rows(&mut w.in_proj, s);
        }
        SmoothSite::ConvIn => {
            divide_cols(&mut w.in_proj, s);
            let (_, c) = w.conv_kernel.dims2().expect("rank-2 kernel");
            for row in w.conv_kernel.f32_mut().chunks_exact_mut(c) {
                row.iter_mut().zip(s).for_each(|(v, &f)| *v *= f);
            }
        }
        SmoothSite::XProj => {
            scale_rows(&mut w.x_proj, s);
            divide_multiplier(&mut w.x_proj_input_scale, s);
        }
        SmoothSite::DtProj => {
            divide_cols(&mut w.x_proj, s);
            scale_rows(&mut w.dt_proj_weight, s);
        }
        SmoothSite::OutProj => {
            scale_rows(&mut w.out_proj, s);
            divide_multiplier(&mut w.out_proj_input_scale, s);
        }
    }
}

fn check_factor(f: &SmoothingFactors, c: &ModelConfig) -> Result<()> {
    if f.tap.point != f.site.tap() {
        return Err(Error::invalid(format!(
            "smoothing factors for site {} recorded at {}, expected tap {:?}",
            f.site,
            f.tap,
            f.site.tap().name()
        )));
    }
    if f.tap.layer >= c.n_layers {
        return Err(Error::invalid(format!(
            "smoothing factors for {}: model has {} layers",
            f.tap, c.n_layers
        )));
    }
    let width = f.site.width(c);
    if f.s.len() != width {
        return Err(Error::invalid(format!(
            "smoothing factors for {}: {} values, site {} needs {width}",
            f.tap,
            f.s.len(),
            f.site
        )));
    }
    if let Some(bad) = f.s.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!(
            "smoothing factors for {}: factor {bad} must be positive and finite",
            f.tap
        )));
    }
    Ok(())
}

/// Fold each factor set into the model. Float outputs are preserved up to
/// rounding; all-ones factors leave the model untouched.
pub fn apply_smoothing(model: &MambaModel, factors: &[SmoothingFactors]) -> Result<MambaModel> {
    let mut out = model.clone();
    for f in factors {
        check_factor(f, &model.config)?;
        if f.s.iter().all(|&v| v == 1.0) {
            continue;
        }
        fold(&mut out.layers[f.tap.layer], f.site, &f.s);
    }
    Ok(out)
}

/// Compute and fold factors for every layer and requested site, in order.
/// Weight absmax is taken from the model as already smoothed by earlier
/// sites, so sites sharing a weight compose.
pub fn smooth_model(
    model: &MambaModel,
    stats: &CalibrationStats,
    alpha: f32,
    sites: &[SmoothSite],
) -> Result<(MambaModel, Vec<SmoothingFactors>)> {
    let c = model.config;
    let mut out = model.clone();
    let mut factors = Vec::new();
    for layer in 0..c.n_layers {
        for &site in sites {
            let act = activation_absmax(stats, layer, site, &c)?;
            let w = weight_absmax(&out.layers[layer], site);
            let f = SmoothingFactors {
                tap: TapId::new(layer, site.tap()),
                site,
                alpha,
                s: compute_smoothing(&act, &w, alpha)?,
            };
            out = apply_smoothing(&out, std::slice::from_ref(&f))?;
            factors.push(f);
        }
    }
    Ok((out, factors))
}

/// Calibration statistics as they would be observed on the smoothed model:
/// the smoothed channels of each affected tap are divided by `s`.
pub fn smoothed_stats(stats: &CalibrationStats, factors: &[SmoothingFactors]) -> CalibrationStats {
    let mut out = stats.clone();
    for f in factors.iter().filter(|f| f.site.tap_sees_smoothed()) {
        if let Some(st) = out.taps.get_mut(&f.tap) {
            for (j, &s) in f.s.iter().enumerate().take(st.n_channels) {
                st.absmax[j] /= s;
                st.sum[j] /= s as f64;
                st.sum_sq[j] /= (s as f64) * (s as f64);
            }
        }
    }
    out
}
