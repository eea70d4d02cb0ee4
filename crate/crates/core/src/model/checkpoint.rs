//! Checkpoint file: `u64` little-endian header length, a JSON header
//! (model config and segment table), then the parameters as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, ModelError, ParamVector, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub n_params: usize,
    pub segments: BTreeMap<String, SegmentEntry>,
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamVector) -> Result<()> {
    let layout = Layout::for_config(config)?;
    if layout != **params.layout() {
        return Err(ModelError::Checkpoint("parameter layout does not match config".into()));
    }
    let header = CheckpointHeader {
        config: config.clone(),
        n_params: params.len(),
        segments: layout
            .offsets()
            .into_iter()
            .map(|(k, (offset, len))| (k, SegmentEntry { offset, len }))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(8 + json.len() + 8 * params.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamVector)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| ModelError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = 8usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body])?;
    let layout = Layout::for_config(&header.config)?;
    if layout.len() != header.n_params {
        return Err(bad("header parameter count disagrees with config"));
    }
    let payload = &bytes[body..];
    if payload.len() != 8 * header.n_params {
        return Err(bad("payload length does not match parameter count"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::new(values, Arc::new(layout))?;
    Ok((header.config, params))
}
