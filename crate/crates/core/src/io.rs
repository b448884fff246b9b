//! Loading and saving models as an SPTQ archive plus a JSON config.

use std::path::Path;

use crate::archive::{load_archive, save_archive};
use crate::error::Result;
use crate::mamba::{MambaModel, ModelConfig};

pub fn load_model(archive_path: impl AsRef<Path>, config_path: impl AsRef<Path>) -> Result<MambaModel> {
    let config = ModelConfig::load(config_path)?;
    let tensors = load_archive(archive_path)?;
    MambaModel::from_tensors(config, &tensors)
}

pub fn save_model(
    model: &MambaModel,
    archive_path: impl AsRef<Path>,
    config_path: impl AsRef<Path>,
) -> Result<()> {
    save_archive(&model.to_tensors(), archive_path)?;
    model.config.save(config_path)
}
