//! Tensor files and atomic output writes.
//!
//! A tensor is stored as a JSON manifest plus a raw blob. Byte `k` of the blob
//! is element `k` of the row-major flattening as a two's-complement i8.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::QuantTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorManifest {
    pub name: String,
    pub dims: Vec<usize>,
    pub scale: f64,
    pub dtype: String,
    /// Blob path, relative to the manifest's directory.
    pub file: String,
}

pub fn encode_blob(t: &QuantTensor) -> Vec<u8> {
    t.data().iter().map(|&v| v as u8).collect()
}

pub fn decode_blob(bytes: &[u8]) -> Vec<i8> {
    bytes.iter().map(|&b| b as i8).collect()
}

/// Write `<dir>/<name>.json` and `<dir>/<name>.bin`; returns the manifest path.
pub fn write_tensor(dir: &Path, name: &str, t: &QuantTensor) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{name}.bin");
    write_atomic(&dir.join(&blob_name), &encode_blob(t))?;
    let manifest = TensorManifest {
        name: name.to_string(),
        dims: t.dims().to_vec(),
        scale: t.scale(),
        dtype: "i8".to_string(),
        file: blob_name,
    };
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_tensor(manifest_path: &Path) -> Result<QuantTensor> {
    let manifest: TensorManifest = read_json(manifest_path)?;
    if manifest.dtype != "i8" {
        return Err(Error::invalid(format!(
            "{}: unsupported dtype {:?}, expected \"i8\"",
            manifest_path.display(),
            manifest.dtype
        )));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.file);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    QuantTensor::new(manifest.dims, decode_blob(&bytes), manifest.scale)
        .map_err(|e| Error::invalid(format!("{}: {e}", manifest_path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Write through a sibling temp file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
