//! Saving and loading a single block.
//!
//! Tensor names are `feature`, `kernel.<i>`, `attention_sam.<i>`,
//! `attention_pos.<i>` and `post_conv`, each suffixed with `.weight` or
//! `.bias`; `<i>` is the layer index within a branch. `config.txt` holds
//! the [`LsDfnConfig`] keys.

use std::path::Path;

use super::config::LsDfnConfig;
use super::params::LsDfnParams;
use crate::checkpoint::{load_checkpoint, restore_into, save_checkpoint};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn save_block<T: Scalar>(dir: impl AsRef<Path>, params: &LsDfnParams<T>, config: &LsDfnConfig) -> Result<()> {
    params.validate(config)?;
    save_checkpoint(dir, &params.named_tensors(), &config.to_kv())
}

/// Load a block; if `expected` is given the stored config must equal it.
pub fn load_block(dir: impl AsRef<Path>, expected: Option<&LsDfnConfig>) -> Result<(LsDfnParams<f32>, LsDfnConfig)> {
    let (tensors, kv) = load_checkpoint(dir)?;
    let config = LsDfnConfig::from_kv(&kv).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::CheckpointMismatch(format!(
                "stored {:?} vs requested {:?}",
                config, want
            )));
        }
    }
    let mut params = LsDfnParams::zeros(&config)?;
    restore_into(tensors, params.named_tensors_mut())?;
    Ok((params, config))
}
