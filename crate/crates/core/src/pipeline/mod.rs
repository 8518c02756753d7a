//! File-artifact orchestration of the full pipeline behind one configuration
//! and one global seed.
//!
//! Each stage reads its upstream artifacts, verifies their checksums and
//! pipeline identity, writes its own outputs plus a `provenance.json`, and
//! never trusts anything it did not verify. The pipeline identity is the
//! checksum of the configuration fields that determine data content
//! (`global_seed`, `schema`, `dataset`, `preprocess`); training options and
//! the output directory stay out of it so the same dataset can serve several
//! model variants and directory layouts.
//!
//! Every random decision derives from `global_seed` through named tags (see
//! [`crate::seeding::derive_seed`]): `synth/scene/<i>` for scene generation,
//! `split` for partitioning, `model/<variant>` for weight init, and
//! `train/<variant>/<train.seed>` for the optimization loop.

mod patch_store;
mod stages;

pub use patch_store::{read_patches, write_patches, PatchIndex};
pub use stages::{
    run_eval, run_green_report, run_prep, run_render, run_synth, run_train, EvalMetrics,
    PerMapMetrics, PrepSummary,
};

use crate::preprocess::ScaleMode;
use crate::raster::ChannelSchema;
use crate::seeding::{sha256_file, sha256_hex};
use crate::train::{EnergySource, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact for stage '{stage}': {path} (run the '{producer}' stage first)")]
    MissingArtifact {
        stage: &'static str,
        producer: &'static str,
        path: PathBuf,
    },
    #[error("checksum mismatch for {path}: recorded {recorded}, found {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        recorded: String,
        actual: String,
    },
    #[error(
        "pipeline identity mismatch against {path}: artifacts were produced with a different \
         global_seed/schema/dataset/preprocess configuration"
    )]
    IdentityMismatch { path: PathBuf },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    UNet(#[from] crate::unet::UNetError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::evaluate::EvalError),
    #[error(transparent)]
    Green(#[from] crate::green::GreenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Usage and dependency errors (exit status 2) versus runtime errors
    /// (exit status 1).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            PipelineError::MissingArtifact { .. }
                | PipelineError::ChecksumMismatch { .. }
                | PipelineError::IdentityMismatch { .. }
                | PipelineError::InvalidConfig(_)
        )
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

pub const CONFIG_VERSION: u32 = 1;

fn default_scenes() -> usize {
    35
}
fn default_extent() -> usize {
    48
}
fn default_phase() -> u8 {
    2
}
fn default_correlation_length() -> f32 {
    9.0
}
fn default_label_noise_sd() -> f32 {
    6.0
}
fn default_boundary_irregularity() -> f32 {
    0.35
}

/// Synthetic dataset parameters. When `specs_path` is set it must point to a
/// JSON list of explicit field specs, which then override the uniform
/// generation fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_scenes")]
    pub scenes: usize,
    #[serde(default = "default_extent")]
    pub height: usize,
    #[serde(default = "default_extent")]
    pub width: usize,
    #[serde(default = "default_phase")]
    pub phase: u8,
    #[serde(default = "default_correlation_length")]
    pub correlation_length: f32,
    #[serde(default = "crate::synth::default_band_ranges")]
    pub band_ranges: Vec<(f32, f32)>,
    #[serde(default = "default_label_noise_sd")]
    pub label_noise_sd: f32,
    #[serde(default = "default_boundary_irregularity")]
    pub boundary_irregularity: f32,
    #[serde(default)]
    pub specs_path: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: default_scenes(),
            height: default_extent(),
            width: default_extent(),
            phase: default_phase(),
            correlation_length: default_correlation_length(),
            band_ranges: crate::synth::default_band_ranges(),
            label_noise_sd: default_label_noise_sd(),
            boundary_irregularity: default_boundary_irregularity(),
            specs_path: None,
        }
    }
}

fn default_bins() -> usize {
    10
}
fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}
fn default_scale_mode() -> ScaleMode {
    ScaleMode::Stddev
}
fn default_iqr_multiplier() -> f64 {
    1.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default = "default_scale_mode")]
    pub scale_mode: ScaleMode,
    #[serde(default = "default_iqr_multiplier")]
    pub iqr_multiplier: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            ratios: default_ratios(),
            scale_mode: default_scale_mode(),
            iqr_multiplier: default_iqr_multiplier(),
        }
    }
}

fn default_variant() -> String {
    "baseline".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: default_variant(),
        }
    }
}

fn default_energy_source() -> EnergySource {
    EnergySource::Estimated { power_watts: 35.0 }
}
fn default_emission_factor() -> f64 {
    0.166
}
fn default_emission_factor_label() -> String {
    "EU grid 2023".to_string()
}
fn default_baseline_variant() -> String {
    "baseline".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    #[serde(default = "default_energy_source")]
    pub source: EnergySource,
    #[serde(default = "default_emission_factor")]
    pub emission_factor: f64,
    #[serde(default = "default_emission_factor_label")]
    pub emission_factor_label: String,
    /// Variant anchoring the savings columns of the green report.
    #[serde(default = "default_baseline_variant")]
    pub baseline_variant: String,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            source: default_energy_source(),
            emission_factor: default_emission_factor(),
            emission_factor_label: default_emission_factor_label(),
            baseline_variant: default_baseline_variant(),
        }
    }
}

/// The one configuration object every stage consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub global_seed: u64,
    /// Output root; excluded from all checksums so runs into different
    /// directories stay bit-identical. CLI `--out` and the environment can
    /// override it.
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default = "ChannelSchema::default_18")]
    pub schema: ChannelSchema,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_VERSION,
            global_seed: 0,
            output_dir: None,
            schema: ChannelSchema::default_18(),
            dataset: DatasetConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            energy: EnergyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        let config: RunConfig = serde_json::from_str(json)?;
        if config.schema_version != CONFIG_VERSION {
            return Err(PipelineError::InvalidConfig(format!(
                "config schema_version {} is not supported (expected {CONFIG_VERSION})",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checksum of the content-determining fields; equal across stages that
    /// may legally share artifacts.
    pub fn pipeline_sha256(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            global_seed: u64,
            schema: &'a ChannelSchema,
            dataset: &'a DatasetConfig,
            preprocess: &'a PreprocessConfig,
        }
        let identity = Identity {
            global_seed: self.global_seed,
            schema: &self.schema,
            dataset: &self.dataset,
            preprocess: &self.preprocess,
        };
        sha256_hex(
            serde_json::to_string(&identity)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Checksum of the full configuration with the output directory
    /// normalized away.
    pub fn config_sha256(&self) -> String {
        let mut normalized = self.clone();
        normalized.output_dir = None;
        sha256_hex(
            serde_json::to_string(&normalized)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

/// Path helpers under one output root.
#[derive(Clone, Debug)]
pub struct StagePaths {
    pub root: PathBuf,
}

impl StagePaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.dataset_dir().join("manifest.json")
    }

    pub fn prep_dir(&self) -> PathBuf {
        self.root.join("prep")
    }

    pub fn patches_bin(&self) -> PathBuf {
        self.prep_dir().join("patches.bin")
    }

    pub fn patches_index(&self) -> PathBuf {
        self.prep_dir().join("patches_index.json")
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.prep_dir().join("split_manifest.json")
    }

    pub fn standardizer(&self) -> PathBuf {
        self.prep_dir().join("standardizer.json")
    }

    pub fn prep_summary(&self) -> PathBuf {
        self.prep_dir().join("summary.json")
    }

    pub fn train_dir(&self, variant: &str) -> PathBuf {
        self.root.join("train").join(variant)
    }

    pub fn train_report(&self, variant: &str) -> PathBuf {
        self.train_dir(variant).join("train_report.json")
    }

    pub fn eval_dir(&self, variant: &str) -> PathBuf {
        self.root.join("eval").join(variant)
    }

    pub fn eval_metrics(&self, variant: &str) -> PathBuf {
        self.eval_dir(variant).join("metrics.json")
    }

    pub fn eval_maps_dir(&self, variant: &str) -> PathBuf {
        self.eval_dir(variant).join("maps")
    }

    pub fn render_dir(&self, variant: &str) -> PathBuf {
        self.root.join("render").join(variant)
    }

    pub fn green_dir(&self) -> PathBuf {
        self.root.join("green")
    }
}

// ---------------------------------------------------------------------------
// Provenance
// ---------------------------------------------------------------------------

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileRecord {
    /// Path relative to the output root.
    pub path: String,
    pub sha256: String,
}

/// Written by every stage next to its outputs; downstream stages verify it
/// before consuming anything.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub stage: String,
    pub pipeline_sha256: String,
    pub config_sha256: String,
    pub upstream: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub(crate) fn record_file(root: &Path, path: &Path) -> Result<FileRecord, PipelineError> {
    let rel = path
        .strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/");
    Ok(FileRecord {
        path: rel,
        sha256: sha256_file(path)?,
    })
}

pub(crate) fn write_provenance(
    dir: &Path,
    provenance: &Provenance,
) -> Result<(), PipelineError> {
    std::fs::write(
        dir.join(PROVENANCE_FILE),
        serde_json::to_string_pretty(provenance)?,
    )?;
    Ok(())
}

/// Load a producer stage's provenance, failing with a dependency error when
/// it is absent and an identity error when it was built from a different
/// pipeline configuration.
pub(crate) fn require_provenance(
    dir: &Path,
    consumer: &'static str,
    producer: &'static str,
    expected_pipeline_sha256: &str,
) -> Result<Provenance, PipelineError> {
    let path = dir.join(PROVENANCE_FILE);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            stage: consumer,
            producer,
            path,
        });
    }
    let provenance: Provenance = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if provenance.pipeline_sha256 != expected_pipeline_sha256 {
        return Err(PipelineError::IdentityMismatch { path });
    }
    Ok(provenance)
}

/// Verify that an upstream output listed in `provenance` still matches its
/// recorded checksum, returning its absolute path.
pub(crate) fn verify_listed_file(
    provenance: &Provenance,
    root: &Path,
    rel_path: &str,
    consumer: &'static str,
    producer: &'static str,
) -> Result<PathBuf, PipelineError> {
    let record = provenance
        .outputs
        .iter()
        .find(|f| f.path == rel_path)
        .ok_or_else(|| PipelineError::MissingArtifact {
            stage: consumer,
            producer,
            path: root.join(rel_path),
        })?;
    let abs = root.join(rel_path);
    if !abs.exists() {
        return Err(PipelineError::MissingArtifact {
            stage: consumer,
            producer,
            path: abs,
        });
    }
    let actual = sha256_file(&abs)?;
    if actual != record.sha256 {
        return Err(PipelineError::ChecksumMismatch {
            path: abs,
            recorded: record.sha256.clone(),
            actual,
        });
    }
    Ok(abs)
}
