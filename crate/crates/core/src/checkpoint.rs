//! Checkpoint files.
//!
//! Layout: 8-byte magic, `u64` LE manifest length, UTF-8 JSON manifest, then
//! the parameter blob as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{declare_params, ModelConfig};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"TRIMATCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub config: RunConfig,
    pub tensors: Vec<TensorRecord>,
    pub blob_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::with_capacity(self.params.total_values() * 4);
        let mut tensors = Vec::with_capacity(self.params.len());
        for e in self.params.entries() {
            tensors.push(TensorRecord {
                name: e.name.clone(),
                shape: e.shape.clone(),
                dtype: "f32le".into(),
                offset: blob.len(),
            });
            for &v in &e.data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            tensors,
            blob_bytes: blob.len(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ck("not a checkpoint (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(mlen))
            .ok_or_else(|| ck("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| ck(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ck(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let blob = &bytes[16 + mlen..];
        if blob.len() != manifest.blob_bytes {
            return Err(ck(format!(
                "blob has {} bytes, manifest declares {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let mut params = ParamStore::new();
        let mut expect = 0;
        for t in &manifest.tensors {
            if t.dtype != "f32le" {
                return Err(ck(format!(
                    "tensor {}: unsupported dtype {}",
                    t.name, t.dtype
                )));
            }
            let n: usize = t.shape.iter().product();
            if t.offset != expect || t.offset + 4 * n > blob.len() {
                return Err(ck(format!(
                    "tensor {}: offset {} out of place",
                    t.name, t.offset
                )));
            }
            let data = blob[t.offset..t.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params
                .insert(t.name.clone(), &t.shape, data)
                .map_err(|e| ck(e.to_string()))?;
            expect = t.offset + 4 * n;
        }
        if expect != blob.len() {
            return Err(ck("blob has trailing bytes"));
        }
        manifest.config.validate()?;
        let c = Checkpoint {
            config: manifest.config,
            step: manifest.step,
            params,
        };
        c.check_against(&c.config.model)?;
        Ok(c)
    }

    /// Fails on the first parameter whose name or shape differs from `model`'s layout.
    pub fn check_against(&self, model: &ModelConfig) -> Result<()> {
        let decls = declare_params(model);
        let stored = self.params.entries();
        for (i, d) in decls.iter().enumerate() {
            match stored.get(i) {
                Some(e) if e.name == d.name && e.shape == d.shape => {}
                Some(e) => {
                    return Err(ck(format!(
                        "tensor {} (shape {:?}) does not match expected {} (shape {:?})",
                        e.name, e.shape, d.name, d.shape
                    )))
                }
                None => return Err(ck(format!("tensor {} is missing", d.name))),
            }
        }
        if let Some(extra) = stored.get(decls.len()) {
            return Err(ck(format!(
                "tensor {} is not part of the model",
                extra.name
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => ck(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small() -> Checkpoint {
        let config = RunConfig::default();
        let params = init_params(&config.model, 5).unwrap();
        Checkpoint {
            config,
            step: 12,
            params,
        }
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = small();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_version_are_errors() {
        let bytes = small().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let text =
            String::from_utf8_lossy(&bytes).replace("\"format_version\":1", "\"format_version\":9");
        let err = Checkpoint::from_bytes(text.as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn mismatch_names_first_tensor() {
        let c = small();
        let mut other = c.config.model.clone();
        other.encoder.stage_channels[1] = 24;
        let err = c.check_against(&other).unwrap_err().to_string();
        assert!(err.contains("stage.2.merge.w"), "{err}");
    }
}
