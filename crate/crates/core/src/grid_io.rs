//! Raw tensor dumps: little-endian `f64` data plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub seed: u64,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `path` (raw data) and the sidecar next to it with a `.json` extension.
pub fn write_tensor(path: &Path, tensor: &Tensor, seed: u64) -> Result<()> {
    fs::write(path, tensor.to_le_bytes())?;
    let meta = Sidecar {
        dtype: "f64le".into(),
        shape: tensor.shape().to_vec(),
        seed,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, Sidecar)> {
    let meta: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)
        .map_err(|e| Error::Invalid(format!("sidecar: {e}")))?;
    if meta.dtype != "f64le" {
        return Err(Error::Invalid(format!("unsupported dtype {}", meta.dtype)));
    }
    let t = Tensor::from_le_bytes(meta.shape.clone(), &fs::read(path)?)
        .ok_or_else(|| Error::Shape(format!("data length does not match shape {:?}", meta.shape)))?;
    Ok((t, meta))
}
