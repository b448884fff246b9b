//! Random models with planted activation outlier channels.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mamba::{MambaModel, ModelConfig};

/// A random model whose `in_proj` x-branch output channels listed in
/// `outlier_channels` are scaled by `magnitude` in every layer, so those
/// channels dominate the input-projection output.
pub fn make_outlier_model(
    config: ModelConfig,
    outlier_channels: &[usize],
    magnitude: f32,
    seed: u64,
) -> Result<MambaModel> {
    let config = config.validated()?;
    if let Some(&bad) = outlier_channels.iter().find(|&&c| c >= config.d_inner) {
        return Err(Error::invalid(format!(
            "outlier channel {bad} out of range for d_inner {}",
            config.d_inner
        )));
    }
    if !(magnitude >= 1.0 && magnitude.is_finite()) {
        return Err(Error::invalid(format!("outlier magnitude {magnitude} must be at least 1")));
    }
    let mut m = MambaModel::random(config, seed);
    let width = 2 * config.d_inner;
    for layer in &mut m.layers {
        for row in layer.in_proj.f32_mut().chunks_exact_mut(width) {
            for &c in outlier_channels {
                row[c] *= magnitude;
            }
        }
    }
    Ok(m)
}

/// `round(fraction · d_inner)` distinct channels (at least one when
/// `fraction > 0`), sorted, drawn deterministically from `seed`.
pub fn pick_outlier_channels(d_inner: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("outlier fraction {fraction} outside [0, 1]")));
    }
    let mut n = (fraction * d_inner as f64).round() as usize;
    if fraction > 0.0 {
        n = n.max(1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_746c_6965_7273);
    let mut picked = sample(&mut rng, d_inner, n.min(d_inner)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
