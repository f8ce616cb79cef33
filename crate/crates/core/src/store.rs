//! Directories of named tensor files described by a versioned TOML manifest.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::{Scalar, Tensor};

/// Manifest record for one tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write each tensor as `<name>.wkt` inside `dir`.
pub fn write_entries<T: Scalar>(dir: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<TensorEntry>> {
    create_dir(dir)?;
    tensors
        .iter()
        .map(|(name, t)| {
            let file = format!("{name}.wkt");
            write_tensor(&dir.join(&file), t)?;
            Ok(TensorEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
                sha256: t.checksum(),
            })
        })
        .collect()
}

/// Read one entry, checking its shape. The checksum is verified only when the
/// stored precision matches `T`.
pub fn read_entry<T: Scalar>(dir: &Path, entry: &TensorEntry, stored: crate::numerics::DType) -> Result<Tensor<T>> {
    let path = dir.join(&entry.file);
    let t: Tensor<T> = read_tensor(&path)?;
    if t.shape() != entry.shape.as_slice() {
        return Err(Error::format(&path, format!("shape {:?} differs from manifest", t.shape())));
    }
    if stored == T::DTYPE && t.checksum() != entry.sha256 {
        return Err(Error::format(&path, "checksum differs from manifest"));
    }
    Ok(t)
}

pub fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<S: DeserializeOwned>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.message().to_string()))
}

/// Reject manifests of another kind or version.
pub fn check_header(path: &Path, format: &str, version: u32, want_format: &str, want_version: u32) -> Result<()> {
    if format != want_format || version != want_version {
        return Err(Error::format(
            path,
            format!("expected {want_format} v{want_version}, found {format} v{version}"),
        ));
    }
    Ok(())
}
