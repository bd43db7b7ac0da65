//! Parameter checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then every tensor as little-endian `f64` in header order.
//! Offsets in the header count `f64` elements from the start of the data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::jsonl::SCHEMA_VERSION;
use crate::model::Model;
use crate::params::ParamSet;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"VAULTCK\x01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: TrainConfig,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<S: Scalar>(model: &Model<S>, config: &TrainConfig, epoch: usize) -> Vec<u8> {
    let views = model.tensors();
    let mut offset = 0;
    let tensors = views
        .iter()
        .map(|t| {
            let e = TensorEntry { name: t.name.clone(), shape: t.shape, offset };
            offset += t.data.len();
            e
        })
        .collect();
    let header = CheckpointHeader { version: SCHEMA_VERSION, config: config.clone(), epoch, tensors };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(16 + json.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &views {
        for x in t.data {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint and rebuilds the model its own header describes.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, Model<S>), CheckpointError> {
    let fmt = |m: &str| CheckpointError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| fmt(&e.to_string()))?;
    if header.version != SCHEMA_VERSION {
        return Err(fmt(&format!("unsupported version {}", header.version)));
    }
    let data = &bytes[16 + hlen..];

    let mut model = Model::<S>::zeros(&header.config.encoder);
    let expected: Vec<(String, (usize, usize))> = model.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if expected.len() != header.tensors.len() {
        return Err(CheckpointError::Mismatch(format!(
            "header lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if name != &entry.name || *shape != entry.shape {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }
    for (slot, entry) in model.tensors_mut().into_iter().zip(&header.tensors) {
        let start = entry.offset * 8;
        let raw = data.get(start..start + slot.len() * 8).ok_or_else(|| fmt("truncated tensor data"))?;
        for (x, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
            *x = S::lit(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    Ok((header, model))
}

pub fn save<S: Scalar>(
    path: impl AsRef<Path>,
    model: &Model<S>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, config, epoch))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Model<S>), CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}

/// Rejects a checkpoint whose model shape differs from `expected`.
pub fn check_compatible(header: &CheckpointHeader, expected: &TrainConfig) -> Result<(), CheckpointError> {
    let (a, b) = (&header.config.encoder, &expected.encoder);
    let same = a.d_model == b.d_model
        && a.n_layers == b.n_layers
        && a.n_heads == b.n_heads
        && a.ffn_dim == b.ffn_dim
        && a.local_window == b.local_window
        && a.max_len == b.max_len
        && a.vocab_size == b.vocab_size;
    if !same {
        return Err(CheckpointError::Mismatch(format!("checkpoint encoder {a:?} vs requested {b:?}")));
    }
    if header.config.window.seq_len != expected.window.seq_len {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint seq_len {} vs requested {}",
            header.config.window.seq_len, expected.window.seq_len
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small() -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig { d_model: 4, n_layers: 1, n_heads: 2, ffn_dim: 6, max_len: 8, vocab_size: 20, ..EncoderConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = small();
        let mut model = Model::<f64>::init(&cfg.encoder).unwrap();
        model.heads.paragraph.b = 0.1 + 0.2;
        let bytes = to_bytes(&model, &cfg, 3);
        let (header, back) = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(header.epoch, 3);
        assert_eq!(header.config, cfg);
        assert_eq!(to_bytes(&back, &cfg, 3), bytes);
    }

    #[test]
    fn f32_model_loads_from_f64_file() {
        let cfg = small();
        let model = Model::<f32>::init(&cfg.encoder).unwrap();
        let (_, back) = from_bytes::<f32>(&to_bytes(&model, &cfg, 0)).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_inputs_fail() {
        let cfg = small();
        let model = Model::<f64>::init(&cfg.encoder).unwrap();
        let bytes = to_bytes(&model, &cfg, 0);
        assert!(matches!(from_bytes::<f64>(b"nope"), Err(CheckpointError::Format(_))));
        assert!(matches!(from_bytes::<f64>(&bytes[..bytes.len() - 1]), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn mismatched_config_is_detected() {
        let cfg = small();
        let model = Model::<f64>::init(&cfg.encoder).unwrap();
        let (header, _) = from_bytes::<f64>(&to_bytes(&model, &cfg, 0)).unwrap();
        let mut other = cfg.clone();
        other.encoder.d_model = 8;
        assert!(matches!(check_compatible(&header, &other), Err(CheckpointError::Mismatch(_))));
        assert!(check_compatible(&header, &cfg).is_ok());
    }
}
