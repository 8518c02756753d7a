//! Flat-binary parameter serialization with a JSON index.
//!
//! The payload is every parameter's f32 data, little-endian, concatenated in
//! set order. The index records name, shape, byte extent, and a SHA-256 per
//! parameter plus one for the whole payload; loading verifies all of them.

use super::graph::ParamSet;
use super::tensor::Tensor4;
use super::AutodiffError;
use crate::seeding::sha256_hex;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamIndexEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub byte_offset: u64,
    pub byte_len: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamIndex {
    pub schema_version: u32,
    pub total_bytes: u64,
    pub sha256: String,
    pub parameters: Vec<ParamIndexEntry>,
}

pub fn save_params(
    params: &ParamSet,
    bin_path: &Path,
    index_path: &Path,
) -> Result<ParamIndex, AutodiffError> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for p in params.iter() {
        let offset = payload.len() as u64;
        let mut bytes = Vec::with_capacity(p.value.num_elements() * 4);
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamIndexEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
            byte_offset: offset,
            byte_len: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let index = ParamIndex {
        schema_version: PARAM_FORMAT_VERSION,
        total_bytes: payload.len() as u64,
        sha256: sha256_hex(&payload),
        parameters: entries,
    };
    std::fs::write(bin_path, &payload)?;
    std::fs::write(index_path, serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn load_params(bin_path: &Path, index_path: &Path) -> Result<ParamSet, AutodiffError> {
    let index: ParamIndex = serde_json::from_str(&std::fs::read_to_string(index_path)?)?;
    let payload = std::fs::read(bin_path)?;
    if payload.len() as u64 != index.total_bytes {
        return Err(AutodiffError::BadParamFile(format!(
            "payload is {} bytes, index says {}",
            payload.len(),
            index.total_bytes
        )));
    }
    if sha256_hex(&payload) != index.sha256 {
        return Err(AutodiffError::ChecksumMismatch {
            name: "<whole file>".into(),
        });
    }
    let mut params = ParamSet::new();
    for entry in &index.parameters {
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() {
            return Err(AutodiffError::BadParamFile(format!(
                "entry '{}' extends past payload end",
                entry.name
            )));
        }
        let bytes = &payload[start..end];
        if sha256_hex(bytes) != entry.sha256 {
            return Err(AutodiffError::ChecksumMismatch {
                name: entry.name.clone(),
            });
        }
        let expected: usize = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(AutodiffError::BadParamFile(format!(
                "entry '{}' is {} bytes, shape implies {expected}",
                entry.name,
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.add(entry.name.clone(), Tensor4::from_vec(entry.shape, data)?);
    }
    Ok(params)
}
