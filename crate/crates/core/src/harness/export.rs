//! Quantized models as SPTQ archives.
//!
//! Quantized weights are stored as their integer payload under the canonical
//! name plus an f32 `<name>.scale` sidecar. Static activation scales live in
//! `layers.{i}.{tap}.act_scale` (`[1]`), zeroed channel lists in
//! `layers.{i}.{tap}.zero_channels`, and the smoothing factors that were
//! folded into the weights in `smoothing.layers.{i}.{site}`. The archive
//! metadata records the configuration.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::QuantConfig;
use super::policy::QuantizedModel;
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::mamba::weights::scale_name;
use crate::mamba::{HookOp, HookSet, MambaModel, ModelConfig, TapId};
use crate::quant::{Bits, Granularity, QuantizedTensor};
use crate::smoothing::{SmoothSite, SmoothingFactors};
use crate::tensor::Tensor;

const ACT_SCALE: &str = ".act_scale";
const ZERO_CHANNELS: &str = ".zero_channels";
const SMOOTHING: &str = "smoothing.layers.";
const META_CONFIG: &str = "quant.config";
const META_ABITS: &str = "quant.abits";

fn scale_tensor(q: &QuantizedTensor) -> Tensor {
    let shape = match q.scheme.granularity {
        Granularity::PerTensor => vec![1],
        Granularity::PerChannel(axis) => (0..q.values.rank())
            .map(|d| if d == axis { q.values.shape()[d] } else { 1 })
            .collect(),
    };
    Tensor::new(shape, q.scales.clone()).expect("one scale per channel")
}

pub fn quantized_archive(q: &QuantizedModel) -> Archive {
    let mut tensors = q.model.to_tensors();
    for (name, w) in &q.weights {
        tensors.insert(name.clone(), w.values.clone());
        tensors.insert(scale_name(name), scale_tensor(w));
    }
    for (tap, &s) in &q.act_scales {
        tensors.insert(format!("{tap}{ACT_SCALE}"), Tensor::full([1], s));
    }
    for (tap, channels) in &q.zeroed {
        let v = channels.iter().map(|&c| c as f32).collect();
        tensors.insert(format!("{tap}{ZERO_CHANNELS}"), Tensor::new([channels.len()], v).unwrap());
    }
    for f in &q.smoothing {
        tensors.insert(
            format!("{SMOOTHING}{}.{}", f.tap.layer, f.site),
            Tensor::new([f.s.len()], f.s.clone()).unwrap(),
        );
    }
    let mut metadata = BTreeMap::new();
    metadata.insert(
        META_CONFIG.to_string(),
        serde_json::to_string(&q.config).expect("config serializes"),
    );
    if let Some(a) = q.config.abits {
        metadata.insert(META_ABITS.to_string(), a.count().to_string());
    }
    Archive { tensors, metadata }
}

pub fn save_quantized(q: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    quantized_archive(q).save(path)
}

/// A candidate model read back from an archive, ready to evaluate.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub model: MambaModel,
    pub hooks: HookSet,
    /// Present for archives written by [`save_quantized`].
    pub config: Option<QuantConfig>,
    /// Factors already folded into the weights, in layer then site order.
    pub smoothing: Vec<SmoothingFactors>,
}

/// Rebuild the model and its hooks. Plain float archives load too, with no
/// hooks.
pub fn candidate_from_archive(archive: &Archive, config: ModelConfig, path: &Path) -> Result<Candidate> {
    let model = MambaModel::from_tensors(config, &archive.tensors)?;
    let qconfig = archive
        .metadata
        .get(META_CONFIG)
        .map(|s| serde_json::from_str::<QuantConfig>(s))
        .transpose()
        .map_err(|e| Error::Header {
            path: path.to_path_buf(),
            reason: format!("metadata {META_CONFIG:?}: {e}"),
        })?;
    let parse_tap = |name: &str, suffix: &str| -> Option<Result<TapId>> {
        name.strip_suffix(suffix).map(|t| t.parse::<TapId>())
    };

    let mut hooks = HookSet::new();
    for (name, t) in &archive.tensors {
        if let Some(tap) = parse_tap(name, ZERO_CHANNELS) {
            let tap = tap?;
            let channels = t
                .try_f32()?
                .iter()
                .map(|&c| {
                    if c >= 0.0 && c.fract() == 0.0 {
                        Ok(c as usize)
                    } else {
                        Err(Error::invalid(format!("{}: {name}: bad channel index {c}", path.display())))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            hooks.push(tap, HookOp::ZeroChannels(channels));
        }
    }
    let mut bits = None;
    for (name, t) in &archive.tensors {
        if let Some(tap) = parse_tap(name, ACT_SCALE) {
            let tap = tap?;
            let b = match bits {
                Some(b) => b,
                None => {
                    let raw = archive.metadata.get(META_ABITS).ok_or_else(|| Error::Header {
                        path: path.to_path_buf(),
                        reason: format!("{name} present but metadata {META_ABITS:?} missing"),
                    })?;
                    let b = raw
                        .parse::<u8>()
                        .map_err(|_| Error::invalid(format!("bad bit width {raw:?}")))
                        .and_then(Bits::try_from)
                        .map_err(|e| Error::Header {
                            path: path.to_path_buf(),
                            reason: format!("metadata {META_ABITS:?}: {e}"),
                        })?;
                    *bits.insert(b)
                }
            };
            let v = t.try_f32()?;
            if t.shape() != [1] || !(v[0] > 0.0 && v[0].is_finite()) {
                return Err(Error::invalid(format!(
                    "{}: {name} must be one positive scale, found shape {:?}",
                    path.display(),
                    t.shape()
                )));
            }
            hooks.push(tap, HookOp::FakeQuant { bits: b, scale: Some(v[0]) });
        }
    }
    let mut smoothing = Vec::new();
    for (name, t) in &archive.tensors {
        let Some(rest) = name.strip_prefix(SMOOTHING) else { continue };
        let bad = || Error::Header {
            path: path.to_path_buf(),
            reason: format!("tensor {name:?}: expected smoothing.layers.<i>.<site>"),
        };
        let (layer, site) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        let site: SmoothSite = site.parse().map_err(|_| bad())?;
        let alpha = qconfig.and_then(|c| c.smooth_alpha).ok_or_else(|| Error::Header {
            path: path.to_path_buf(),
            reason: format!("{name} present but metadata {META_CONFIG:?} has no alpha"),
        })?;
        smoothing.push(SmoothingFactors {
            tap: TapId::new(layer, site.tap()),
            site,
            alpha,
            s: t.try_f32()?.to_vec(),
        });
    }
    smoothing.sort_by_key(|f| (f.tap.layer, SmoothSite::ALL.iter().position(|s| *s == f.site)));
    Ok(Candidate {
        model,
        hooks,
        config: qconfig,
        smoothing,
    })
}

pub fn load_candidate(archive_path: impl AsRef<Path>, config_path: impl AsRef<Path>) -> Result<Candidate> {
    let path = archive_path.as_ref();
    let config = ModelConfig::load(config_path)?;
    candidate_from_archive(&Archive::load(path)?, config, path)
}
