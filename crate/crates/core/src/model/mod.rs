//! Inc-GAN: Inception blocks with channel attention, the U-Net generator and
//! the spectrally normalized PatchGAN discriminator.

mod attention;
mod discriminator;
mod generator;
mod inception;
mod layers;
pub mod spectral;

pub use attention::ChannelAttention;
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{adaptive_depth, generator_depth, Generator, GeneratorConfig};
pub use inception::InceptionBlock;
pub use layers::{BatchNorm2d, Conv2d, Ctx, Mode};

use thiserror::Error;

use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::{ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter {0} received no gradient")]
    DeadParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

/// Flattens parameters and buffers into `(name, tensor)` pairs.
pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    out.extend(store.buffers().map(|(k, v)| (k.clone(), v.clone())));
    out
}

/// Restores every parameter and buffer of `store` from `tensors` by name.
pub fn load_store_tensors(
    store: &mut ParamStore,
    tensors: &[(String, Tensor)],
) -> Result<(), ModelError> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    };
    for p in store.params_mut() {
        let t = find(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(ModelError::Config(format!(
                "{}: stored shape {:?}, model shape {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    let keys: Vec<String> = store.buffers().map(|(k, _)| k.clone()).collect();
    for k in keys {
        let t = find(&k)?;
        store.set_buffer(k, t);
    }
    Ok(())
}
