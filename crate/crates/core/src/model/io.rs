//! Model file: `QDST` magic, `u32` format version, `u32` config length, the
//! JSON-encoded [`ModelConfig`], then every tensor as little-endian `f32` in
//! [`ModelParams::tensors`] order. All integers are little-endian.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ModelParams};
use crate::error::{QdstError, Result};
use crate::tensor::Real;

pub const MAGIC: &[u8; 4] = b"QDST";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let config = serde_json::to_vec(&model.config).expect("model config serialises");
    let mut buf = Vec::with_capacity(12 + config.len() + 4 * model.params.num_parameters());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    for (_, tensor) in model.params.tensors() {
        for &v in tensor {
            let v = v.to_f32().unwrap_or(f32::NAN);
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| QdstError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            QdstError::CorruptModel(format!(
                "truncated while reading {what}: need {len} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| QdstError::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(QdstError::CorruptModel("bad magic bytes, not a QDST model".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(QdstError::CorruptModel(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config block")?)
        .map_err(|e| QdstError::CorruptModel(format!("config block: {e}")))?;
    config
        .validate()
        .map_err(|e| QdstError::CorruptModel(format!("embedded config is invalid: {e}")))?;
    let mut params = ModelParams::<T>::zeros(&config);
    for (name, tensor) in params.tensors_mut() {
        let raw = r.take(4 * tensor.len(), &name)?;
        for (dst, chunk) in tensor.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = T::lit(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
    }
    if r.pos != bytes.len() {
        return Err(QdstError::CorruptModel(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Model::new(config, params).map_err(|e| QdstError::CorruptModel(e.to_string()))
}

/// Loads a model and checks that its embedded config equals `expected`.
pub fn load_model_expecting<T: Real>(path: &Path, expected: &ModelConfig) -> Result<Model<T>> {
    let model = load_model(path)?;
    if &model.config != expected {
        return Err(QdstError::CorruptModel(format!(
            "config mismatch: file has {}, expected {}",
            serde_json::to_string(&model.config).unwrap_or_default(),
            serde_json::to_string(expected).unwrap_or_default()
        )));
    }
    Ok(model)
}
