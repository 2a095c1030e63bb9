//! Decoder selection and the reference training recipe for the learned VAE.

use crate::episode::DecoderKind;
use mcmppi_core::kinematics::ChainModel;
use mcmppi_core::manifold_codec::{
    generate_dataset, train_vae, AnalyticChart, CodecError, Decoder, TrainConfig, VaeParams,
};
use std::path::Path;

/// Samples in the reference training set.
pub const DATASET_SIZE: usize = 5000;
pub const DATASET_SEED: u64 = 1;
pub const TRAIN_SEED: u64 = 7;

/// Generates the reference dataset and trains a VAE on it with the default
/// hyperparameters. Deterministic for a given model.
pub fn train_reference_vae(model: &ChainModel) -> Result<VaeParams, CodecError> {
    let data = generate_dataset(model, DATASET_SIZE, DATASET_SEED)?;
    train_vae(
        model,
        &data,
        &TrainConfig {
            seed: TRAIN_SEED,
            ..Default::default()
        },
    )
}

/// Loads `path` if it exists, otherwise trains the reference VAE and stores
/// it there.
pub fn cached_reference_vae(model: &ChainModel, path: &Path) -> Result<VaeParams, CodecError> {
    if path.exists() {
        return VaeParams::load(path);
    }
    let params = train_reference_vae(model)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    params.save(path)?;
    Ok(params)
}

/// Builds the decoder a latent mode plans through. `vae` supplies the
/// learned decoder; the analytic chart exists only for the planar model.
pub fn build_decoder(
    model: &ChainModel,
    kind: DecoderKind,
    vae: Option<VaeParams>,
) -> Result<Box<dyn Decoder>, CodecError> {
    match kind {
        DecoderKind::Analytic => Ok(Box::new(AnalyticChart::new(model)?)),
        DecoderKind::Learned => match vae {
            Some(p) => Ok(Box::new(p)),
            None => Ok(Box::new(train_reference_vae(model)?)),
        },
    }
}
