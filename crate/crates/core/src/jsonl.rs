//! Line-delimited JSON artifacts carrying a schema `version` field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: unsupported schema version {found}")]
    Version { path: PathBuf, line: usize, found: u32 },
}

#[derive(Serialize, Deserialize)]
pub struct Versioned<T> {
    pub version: u32,
    #[serde(flatten)]
    pub inner: T,
}

impl<T> Versioned<T> {
    pub fn new(inner: T) -> Self {
        Self { version: SCHEMA_VERSION, inner }
    }
}

pub fn to_versioned_string<T: Serialize>(value: &T) -> String {
    serde_json::to_string(&Versioned::new(value)).expect("artifact serializes")
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), JsonlError> {
    let path = path.as_ref();
    let io = |source| JsonlError::Io { path: path.to_path_buf(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        writeln!(out, "{}", to_versioned_string(item)).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let path = path.as_ref();
    let io = |source| JsonlError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Versioned<T> = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if parsed.version != SCHEMA_VERSION {
            return Err(JsonlError::Version { path: path.to_path_buf(), line: idx + 1, found: parsed.version });
        }
        items.push(parsed.inner);
    }
    Ok(items)
}
