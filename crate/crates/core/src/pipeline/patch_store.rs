//! Binary patch store: the canonical (unstandardized) patch pool written by
//! the prep stage and consumed by train and eval.
//!
//! Layout per patch: C·64 input f32s, 64 label f32s, 64 mask bytes, all
//! little-endian, in pool order. The JSON index carries shapes and origins.

use super::PipelineError;
use crate::preprocess::{LabeledPatch, PatchOrigin};
use crate::raster::PATCH_SIZE;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;

const PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchIndex {
    pub schema_version: u32,
    pub count: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub origins: Vec<PatchOrigin>,
}

pub fn write_patches(
    pool: &[LabeledPatch],
    bin_path: &Path,
    index_path: &Path,
) -> Result<PatchIndex, PipelineError> {
    let channels = pool.first().map(|p| p.channels).unwrap_or(0);
    let mut writer = BufWriter::new(std::fs::File::create(bin_path)?);
    for patch in pool {
        debug_assert_eq!(patch.channels, channels);
        for v in &patch.input {
            writer.write_all(&v.to_le_bytes())?;
        }
        for v in &patch.label {
            writer.write_all(&v.to_le_bytes())?;
        }
        for m in &patch.label_mask {
            writer.write_all(&[u8::from(*m)])?;
        }
    }
    writer.flush()?;
    let index = PatchIndex {
        schema_version: 1,
        count: pool.len(),
        channels,
        patch_size: PATCH_SIZE,
        origins: pool.iter().map(|p| p.origin.clone()).collect(),
    };
    std::fs::write(index_path, serde_json::to_string(&index)?)?;
    Ok(index)
}

pub fn read_patches(
    bin_path: &Path,
    index_path: &Path,
) -> Result<Vec<LabeledPatch>, PipelineError> {
    let index: PatchIndex = serde_json::from_str(&std::fs::read_to_string(index_path)?)?;
    if index.patch_size != PATCH_SIZE {
        return Err(PipelineError::InvalidConfig(format!(
            "patch store uses patch size {}, this build expects {PATCH_SIZE}",
            index.patch_size
        )));
    }
    let bytes = std::fs::read(bin_path)?;
    let stride = index.channels * PIXELS * 4 + PIXELS * 4 + PIXELS;
    if bytes.len() != stride * index.count || index.origins.len() != index.count {
        return Err(PipelineError::InvalidConfig(format!(
            "patch store is {} bytes for {} patches of stride {stride}",
            bytes.len(),
            index.count
        )));
    }
    let mut pool = Vec::with_capacity(index.count);
    for (i, origin) in index.origins.iter().enumerate() {
        let base = i * stride;
        let input_end = base + index.channels * PIXELS * 4;
        let label_end = input_end + PIXELS * 4;
        let input: Vec<f32> = bytes[base..input_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let label: Vec<f32> = bytes[input_end..label_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let label_mask: Vec<bool> = bytes[label_end..label_end + PIXELS]
            .iter()
            .map(|b| *b != 0)
            .collect();
        pool.push(LabeledPatch {
            channels: index.channels,
            input,
            label,
            label_mask,
            origin: origin.clone(),
        });
    }
    Ok(pool)
}
