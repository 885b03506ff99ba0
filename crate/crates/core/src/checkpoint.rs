//! Checkpoint directories.
//!
//! Layout:
//!
//! ```text
//! <dir>/manifest.txt   name=file, one line per tensor
//! <dir>/config.txt     key=value configuration
//! <dir>/<name>.lsdt    tensor files
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::kv::KvMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, tensors: &[(String, &Tensor<T>)], config: &KvMap) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = KvMap::default();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['=', '/', '\\', '\n']) {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let file = format!("{name}.lsdt");
        write_tensor(dir.join(&file), *t)?;
        manifest.insert(name.clone(), file);
    }
    write_text(&dir.join(MANIFEST), &manifest.to_text())?;
    write_text(&dir.join(CONFIG), &config.to_text())
}

/// Returns tensors by name and the stored configuration.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(BTreeMap<String, Tensor<f32>>, KvMap)> {
    let dir = dir.as_ref();
    if !dir.join(MANIFEST).is_file() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let manifest = KvMap::parse(&read_text(&dir.join(MANIFEST))?)?;
    let config = KvMap::parse(&read_text(&dir.join(CONFIG))?)?;
    let mut tensors = BTreeMap::new();
    for (name, file) in manifest.iter() {
        tensors.insert(name.to_string(), read_tensor(dir.join(file))?);
    }
    Ok((tensors, config))
}

/// Copy loaded tensors into `slots`, requiring identical names and shapes.
pub fn restore_into<T: Scalar>(mut loaded: BTreeMap<String, Tensor<f32>>, slots: Vec<(String, &mut Tensor<T>)>) -> Result<()> {
    for (name, slot) in slots {
        let t = loaded
            .remove(&name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: stored shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.cast();
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::CheckpointMismatch(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
