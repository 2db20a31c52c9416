//! Checkpoint container: a JSON manifest next to a blob of little-endian f64
//! values concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::gru::{InverterParams, InverterShape};
use super::params::{ModelConfig, ModelParams, ParamSet};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// What the tensors are: `model`, `inverter`, `namoe`, ...
    pub role: String,
    /// Role-specific configuration (model config, inverter shape, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path for a manifest path (`x.json` -> `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_tensors(
    manifest_path: &Path,
    role: &str,
    meta: serde_json::Value,
    tensors: &ParamSet,
) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let off = bytes.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            byte_offset: off,
            byte_len: bytes.len() - off,
        });
    }
    let m = Manifest {
        version: FORMAT_VERSION,
        role: role.into(),
        meta,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors: entries,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&blob, bytes)?;
    fs::write(manifest_path, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

pub fn load_tensors(manifest_path: &Path) -> Result<(Manifest, ParamSet)> {
    let m: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            m.version
        )));
    }
    let blob_file = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&m.blob);
    let bytes = fs::read(blob_file)?;
    let expected: usize = m.tensors.iter().map(|e| e.byte_len).sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest lists {}",
            bytes.len(),
            expected
        )));
    }
    let mut out = ParamSet::new();
    let mut cursor = 0usize;
    for e in &m.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if e.byte_offset != cursor || e.byte_len != n * 8 {
            return Err(Error::Checkpoint(format!("{}: bad extent", e.name)));
        }
        let data = bytes[cursor..cursor + e.byte_len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        cursor += e.byte_len;
        if out
            .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
        }
    }
    Ok((m, out))
}

fn expect_role(m: &Manifest, role: &str) -> Result<()> {
    if m.role != role {
        return Err(Error::Checkpoint(format!(
            "expected role {role}, found {}",
            m.role
        )));
    }
    Ok(())
}

impl ModelParams {
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        save_tensors(
            manifest_path,
            "model",
            serde_json::to_value(&self.config)?,
            &self.tensors,
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (m, tensors) = load_tensors(manifest_path)?;
        expect_role(&m, "model")?;
        let config: ModelConfig = serde_json::from_value(m.meta)?;
        let fresh = ModelParams::build(config.clone(), 0)?;
        for (k, t) in &fresh.tensors {
            match tensors.get(k) {
                Some(x) if x.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen {k}"))),
            }
        }
        Ok(ModelParams { config, tensors })
    }
}

impl InverterParams {
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        save_tensors(
            manifest_path,
            "inverter",
            serde_json::to_value(self.shape)?,
            &self.tensors,
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (m, tensors) = load_tensors(manifest_path)?;
        expect_role(&m, "inverter")?;
        let shape: InverterShape = serde_json::from_value(m.meta)?;
        Ok(InverterParams { shape, tensors })
    }
}
