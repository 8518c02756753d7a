//! The six pipeline stages, each reading verified artifacts and writing its
//! own outputs plus provenance.

use super::{
    read_patches, record_file, require_provenance, verify_listed_file, write_patches,
    write_provenance, PipelineError, Provenance, RunConfig, StagePaths,
};
use crate::autodiff::Tensor4;
use crate::evaluate::{
    map_metrics, metrics_csv, patch_metrics, pooled_map_metrics, reconstruct_map, render_pair,
    MetricReport,
};
use crate::green::{EmissionFactor, GreenReport};
use crate::preprocess::{
    extract_patches, fit_standardizer, iqr_filter, stratified_split, DatasetSplit, LabeledPatch,
    SplitManifest, Standardizer,
};
use crate::raster::{read_prescription, write_prescription, PrescriptionMap, DEFAULT_NODATA};
use crate::seeding::derive_seed;
use crate::synth::{generate_dataset, load_dataset, read_manifest, DatasetManifest, FieldSpec};
use crate::train::{train_loop, EpochRecord, TrainReport};
use crate::unet::{build_model, load_checkpoint, save_checkpoint, WidthConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn field_specs(config: &RunConfig) -> Result<Vec<FieldSpec>, PipelineError> {
    if let Some(path) = &config.dataset.specs_path {
        let path = Path::new(path);
        if !path.exists() {
            return Err(PipelineError::InvalidConfig(format!(
                "dataset.specs_path '{}' does not exist",
                path.display()
            )));
        }
        let specs: Vec<FieldSpec> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        return Ok(specs);
    }
    let d = &config.dataset;
    Ok((0..d.scenes)
        .map(|i| FieldSpec {
            parcel_id: format!("parcel_{i:03}"),
            phase: d.phase,
            height: d.height,
            width: d.width,
            correlation_length: d.correlation_length,
            band_ranges: d.band_ranges.clone(),
            label_noise_sd: d.label_noise_sd,
            boundary_irregularity: d.boundary_irregularity,
            seed: derive_seed(config.global_seed, &format!("synth/scene/{i}")),
        })
        .collect())
}

/// Generate the synthetic dataset and its manifest.
pub fn run_synth(config: &RunConfig, root: &Path) -> Result<DatasetManifest, PipelineError> {
    let paths = StagePaths::new(root);
    let specs = field_specs(config)?;
    let manifest = generate_dataset(&specs, &config.schema, &paths.dataset_dir())?;
    let provenance = Provenance {
        schema_version: 1,
        stage: "synth".into(),
        pipeline_sha256: config.pipeline_sha256(),
        config_sha256: config.config_sha256(),
        upstream: vec![],
        outputs: vec![record_file(root, &paths.dataset_manifest())?],
    };
    write_provenance(&paths.dataset_dir(), &provenance)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// prep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepSummary {
    pub schema_version: u32,
    pub kept_parcels: Vec<String>,
    pub dropped_parcels: Vec<String>,
    pub total_patches: usize,
    pub train_patches: usize,
    pub validation_patches: usize,
    pub test_patches: usize,
    pub test_parcels: Vec<String>,
    pub bin_edges: Vec<f64>,
    pub clamped_channels: Vec<String>,
}

/// Filter outliers, extract patches, split, and fit the standardizer.
pub fn run_prep(config: &RunConfig, root: &Path) -> Result<PrepSummary, PipelineError> {
    let paths = StagePaths::new(root);
    let identity = config.pipeline_sha256();
    let synth_prov = require_provenance(&paths.dataset_dir(), "prep", "synth", &identity)?;
    let manifest_path =
        verify_listed_file(&synth_prov, root, "dataset/manifest.json", "prep", "synth")?;
    let manifest = read_manifest(&manifest_path)?;
    let scenes = load_dataset(&manifest, &paths.dataset_dir())?;

    let (kept, dropped) = iqr_filter(scenes, config.preprocess.iqr_multiplier)?;
    let kept_parcels: Vec<String> = kept.iter().map(|s| s.stack.parcel_id.clone()).collect();
    let dropped_parcels: Vec<String> = dropped.iter().map(|s| s.stack.parcel_id.clone()).collect();

    let mut pool: Vec<LabeledPatch> = Vec::new();
    for scene in &kept {
        pool.extend(extract_patches(scene)?);
    }
    let split = stratified_split(
        &pool,
        config.preprocess.ratios,
        derive_seed(config.global_seed, "split"),
        config.preprocess.bins,
    )?;

    let train_refs: Vec<&LabeledPatch> = split.train.iter().map(|i| &pool[*i]).collect();
    let channel_names: Vec<String> = config
        .schema
        .entries()
        .iter()
        .map(|e| e.name.clone())
        .collect();
    let standardizer = fit_standardizer(
        &train_refs,
        config.preprocess.scale_mode,
        &format!("train;pipeline={}", &identity[..12]),
        &channel_names,
    )?;

    std::fs::create_dir_all(paths.prep_dir())?;
    write_patches(&pool, &paths.patches_bin(), &paths.patches_index())?;
    let split_manifest = split.to_manifest(&pool);
    std::fs::write(
        paths.split_manifest(),
        serde_json::to_string(&split_manifest)?,
    )?;
    std::fs::write(
        paths.standardizer(),
        serde_json::to_string_pretty(&standardizer)?,
    )?;
    let summary = PrepSummary {
        schema_version: 1,
        kept_parcels,
        dropped_parcels,
        total_patches: pool.len(),
        train_patches: split.train.len(),
        validation_patches: split.validation.len(),
        test_patches: split.test.len(),
        test_parcels: split.test_parcels.clone(),
        bin_edges: split.bin_edges.clone(),
        clamped_channels: standardizer.clamped_channels.clone(),
    };
    std::fs::write(paths.prep_summary(), serde_json::to_string_pretty(&summary)?)?;

    let provenance = Provenance {
        schema_version: 1,
        stage: "prep".into(),
        pipeline_sha256: identity,
        config_sha256: config.config_sha256(),
        upstream: vec![record_file(root, &manifest_path)?],
        outputs: vec![
            record_file(root, &paths.patches_bin())?,
            record_file(root, &paths.patches_index())?,
            record_file(root, &paths.split_manifest())?,
            record_file(root, &paths.standardizer())?,
            record_file(root, &paths.prep_summary())?,
        ],
    };
    write_provenance(&paths.prep_dir(), &provenance)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct PrepArtifacts {
    pool: Vec<LabeledPatch>,
    split: DatasetSplit,
    standardizer: Standardizer,
}

fn load_prep_artifacts(
    config: &RunConfig,
    root: &Path,
    consumer: &'static str,
) -> Result<PrepArtifacts, PipelineError> {
    let paths = StagePaths::new(root);
    let identity = config.pipeline_sha256();
    let prep_prov = require_provenance(&paths.prep_dir(), consumer, "prep", &identity)?;
    let bin = verify_listed_file(&prep_prov, root, "prep/patches.bin", consumer, "prep")?;
    let index = verify_listed_file(&prep_prov, root, "prep/patches_index.json", consumer, "prep")?;
    let split_path =
        verify_listed_file(&prep_prov, root, "prep/split_manifest.json", consumer, "prep")?;
    let std_path = verify_listed_file(&prep_prov, root, "prep/standardizer.json", consumer, "prep")?;

    let pool = read_patches(&bin, &index)?;
    let split_manifest: SplitManifest =
        serde_json::from_str(&std::fs::read_to_string(&split_path)?)?;
    let split = DatasetSplit::from_manifest(&split_manifest, &pool)?;
    let standardizer: Standardizer = serde_json::from_str(&std::fs::read_to_string(&std_path)?)?;
    Ok(PrepArtifacts {
        pool,
        split,
        standardizer,
    })
}

fn model_variant(config: &RunConfig) -> Result<WidthConfig, PipelineError> {
    WidthConfig::by_name(&config.model.variant)
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))
}

/// Effective training seed: global seed, variant, and the user seed field
/// all feed the derivation.
fn effective_train_seed(config: &RunConfig, variant: &str) -> u64 {
    derive_seed(
        config.global_seed,
        &format!("train/{variant}/{}", config.train.seed),
    )
}

/// Train the configured variant and write its checkpoint and report.
pub fn run_train(
    config: &RunConfig,
    root: &Path,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport, PipelineError> {
    let paths = StagePaths::new(root);
    let identity = config.pipeline_sha256();
    let width = model_variant(config)?;
    let artifacts = load_prep_artifacts(config, root, "train")?;

    // Standardize the pool once; the raw pool is no longer needed here.
    let standardized: Vec<LabeledPatch> = artifacts
        .pool
        .into_iter()
        .map(|p| artifacts.standardizer.apply(&p))
        .collect::<Result<_, _>>()?;

    let mut model = build_model(
        &width,
        config.schema.len(),
        derive_seed(config.global_seed, &format!("model/{}", width.name)),
    )?;
    let mut train_config = config.train.clone();
    train_config.seed = effective_train_seed(config, &width.name);

    let mut report = train_loop(
        &mut model,
        &standardized,
        &artifacts.split,
        &train_config,
        &config.energy.source,
        &mut progress,
    )?;

    let train_dir = paths.train_dir(&width.name);
    save_checkpoint(
        &model,
        &train_dir,
        &config.schema.sha256(),
        &config.config_sha256(),
    )?;
    report.checkpoint_path = Some(
        train_dir
            .join("checkpoint.bin")
            .strip_prefix(root)
            .unwrap_or(&train_dir.join("checkpoint.bin"))
            .to_string_lossy()
            .replace('\\', "/"),
    );
    report.config_sha256 = Some(config.config_sha256());
    std::fs::write(
        paths.train_report(&width.name),
        serde_json::to_string_pretty(&report)?,
    )?;

    let prep_prov = require_provenance(&paths.prep_dir(), "train", "prep", &identity)?;
    let provenance = Provenance {
        schema_version: 1,
        stage: "train".into(),
        pipeline_sha256: identity,
        config_sha256: config.config_sha256(),
        upstream: prep_prov.outputs.clone(),
        outputs: vec![
            record_file(root, &train_dir.join("checkpoint.bin"))?,
            record_file(root, &train_dir.join("checkpoint_index.json"))?,
            record_file(root, &train_dir.join("checkpoint_header.json"))?,
            record_file(root, &paths.train_report(&width.name))?,
        ],
    };
    write_provenance(&train_dir, &provenance)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerMapMetrics {
    pub parcel_id: String,
    pub phase: u8,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub schema_version: u32,
    pub variant: String,
    pub parameter_count: usize,
    /// Pooled metrics over all test patches, original units.
    pub patch: MetricReport,
    /// Pooled metrics over all reconstructed test maps.
    pub map_pooled: MetricReport,
    pub per_map: Vec<PerMapMetrics>,
    /// The predict-train-mean reference on the same test patches and maps.
    pub mean_baseline_patch: MetricReport,
    pub mean_baseline_map: MetricReport,
    pub train_mean_label: f64,
    pub config_sha256: String,
}

fn standardize_input_tensor(standardizer: &Standardizer, input: &mut Tensor4) {
    let [n, channels, h, w] = input.shape();
    let hw = h * w;
    let data = input.data_mut();
    for nn in 0..n {
        for ch in 0..channels {
            let mean = standardizer.channel_mean[ch];
            let scale = standardizer.channel_scale[ch];
            let base = (nn * channels + ch) * hw;
            for v in &mut data[base..base + hw] {
                *v = ((*v as f64 - mean) / scale) as f32;
            }
        }
    }
}

/// Evaluate the configured variant's checkpoint on the isolated test
/// partition: patch metrics, per-map and pooled map metrics, reconstructed
/// prescription maps, and the predict-train-mean reference.
pub fn run_eval(config: &RunConfig, root: &Path) -> Result<EvalMetrics, PipelineError> {
    let paths = StagePaths::new(root);
    let identity = config.pipeline_sha256();
    let width = model_variant(config)?;
    let variant = width.name.clone();

    let train_dir = paths.train_dir(&variant);
    let train_prov = require_provenance(&train_dir, "eval", "train", &identity)?;
    for file in [
        "checkpoint.bin",
        "checkpoint_index.json",
        "checkpoint_header.json",
    ] {
        verify_listed_file(
            &train_prov,
            root,
            &format!("train/{variant}/{file}"),
            "eval",
            "train",
        )?;
    }
    let (model, header) = load_checkpoint(&train_dir)?;
    if header.input_schema_sha256 != config.schema.sha256() {
        return Err(PipelineError::InvalidConfig(format!(
            "checkpoint was trained against channel schema {} but the config specifies {}",
            header.input_schema_sha256,
            config.schema.sha256()
        )));
    }

    let artifacts = load_prep_artifacts(config, root, "eval")?;
    let synth_prov = require_provenance(&paths.dataset_dir(), "eval", "synth", &identity)?;
    let manifest_path =
        verify_listed_file(&synth_prov, root, "dataset/manifest.json", "eval", "synth")?;
    let manifest = read_manifest(&manifest_path)?;

    // Forward the test partition in batches: standardized inputs in,
    // de-standardized predictions out.
    let test = &artifacts.split.test;
    if test.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "split has no test patches".into(),
        ));
    }
    let batch = config.train.batch_size.max(1);
    let pixels = 64usize;
    let mut predictions = Vec::with_capacity(test.len() * pixels);
    let mut labels = Vec::with_capacity(test.len() * pixels);
    let mut mask = Vec::with_capacity(test.len() * pixels);
    for chunk in test.chunks(batch) {
        let (mut input, batch_labels, batch_mask) =
            crate::train::batch_tensors(&artifacts.pool, chunk, None);
        standardize_input_tensor(&artifacts.standardizer, &mut input);
        let pred = model.predict(&input)?;
        predictions.extend(
            pred.data()
                .iter()
                .map(|v| artifacts.standardizer.destandardize_label(*v)),
        );
        labels.extend_from_slice(batch_labels.data());
        mask.extend_from_slice(&batch_mask);
    }
    let pred_tensor = Tensor4::from_vec([test.len(), 1, 8, 8], predictions)
        .expect("batch assembly is consistent");
    let label_tensor =
        Tensor4::from_vec([test.len(), 1, 8, 8], labels).expect("batch assembly is consistent");
    let patch_report = patch_metrics(&pred_tensor, &label_tensor, &mask)?;

    let train_mean = artifacts.standardizer.label_mean;
    let mean_tensor = Tensor4::filled([test.len(), 1, 8, 8], train_mean as f32);
    let mean_baseline_patch = patch_metrics(&mean_tensor, &label_tensor, &mask)?;

    // Reconstruct one map per test scene, in deterministic scene order.
    let mut by_scene: BTreeMap<(String, u8), Vec<usize>> = BTreeMap::new();
    for (slot, idx) in test.iter().enumerate() {
        let origin = &artifacts.pool[*idx].origin;
        by_scene
            .entry((origin.parcel_id.clone(), origin.phase))
            .or_default()
            .push(slot);
    }
    let maps_dir = paths.eval_maps_dir(&variant);
    std::fs::create_dir_all(&maps_dir)?;
    let mut per_map = Vec::new();
    let mut pairs: Vec<(PrescriptionMap, PrescriptionMap)> = Vec::new();
    let mut baseline_pairs: Vec<(PrescriptionMap, PrescriptionMap)> = Vec::new();
    let mut map_outputs = Vec::new();
    for ((parcel_id, phase), slots) in &by_scene {
        let entry = manifest
            .scenes
            .iter()
            .find(|s| &s.parcel_id == parcel_id && s.phase == *phase)
            .ok_or_else(|| {
                PipelineError::InvalidConfig(format!(
                    "test parcel '{parcel_id}' phase {phase} is not in the dataset manifest"
                ))
            })?;
        let patch_preds: Vec<_> = slots
            .iter()
            .map(|slot| {
                let idx = test[*slot];
                let values: Vec<f32> =
                    pred_tensor.data()[slot * pixels..(slot + 1) * pixels].to_vec();
                (artifacts.pool[idx].origin.clone(), values)
            })
            .collect();
        let (recon, _coverage) =
            reconstruct_map(&patch_preds, entry.height, entry.width, parcel_id, *phase)?;
        let truth = read_prescription(
            &paths.dataset_dir().join(&entry.truth_band),
            &paths.dataset_dir().join(&entry.truth_header),
        )?;
        let report = map_metrics(&recon, &truth)?;
        per_map.push(PerMapMetrics {
            parcel_id: parcel_id.clone(),
            phase: *phase,
            report,
        });

        let base = format!("{parcel_id}_p{phase}_pred");
        let band = maps_dir.join(format!("{base}.band"));
        let header_path = maps_dir.join(format!("{base}.json"));
        write_prescription(&recon, &band, &header_path, DEFAULT_NODATA)?;
        map_outputs.push(band.clone());
        map_outputs.push(header_path);

        let constant = PrescriptionMap::new(
            crate::raster::BandGrid::filled(entry.height, entry.width, train_mean as f32),
            recon.mask.clone(),
            parcel_id.clone(),
            *phase,
        )?;
        baseline_pairs.push((constant, truth.clone()));
        pairs.push((recon, truth));
    }
    let map_pooled = pooled_map_metrics(pairs.iter().map(|(a, b)| (a, b)))?;
    let mean_baseline_map = pooled_map_metrics(baseline_pairs.iter().map(|(a, b)| (a, b)))?;

    let metrics = EvalMetrics {
        schema_version: 1,
        variant: variant.clone(),
        parameter_count: model.parameter_count(),
        patch: patch_report,
        map_pooled,
        per_map,
        mean_baseline_patch,
        mean_baseline_map,
        train_mean_label: train_mean,
        config_sha256: config.config_sha256(),
    };
    std::fs::create_dir_all(paths.eval_dir(&variant))?;
    std::fs::write(
        paths.eval_metrics(&variant),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    let csv = metrics_csv(&[
        (variant.clone(), metrics.patch.clone()),
        (variant.clone(), metrics.map_pooled.clone()),
        (format!("{variant}-train-mean"), metrics.mean_baseline_patch.clone()),
        (format!("{variant}-train-mean"), metrics.mean_baseline_map.clone()),
    ]);
    let csv_path = paths.eval_dir(&variant).join("metrics.csv");
    std::fs::write(&csv_path, csv)?;

    let mut outputs = vec![
        record_file(root, &paths.eval_metrics(&variant))?,
        record_file(root, &csv_path)?,
    ];
    for path in &map_outputs {
        outputs.push(record_file(root, path)?);
    }
    let provenance = Provenance {
        schema_version: 1,
        stage: "eval".into(),
        pipeline_sha256: identity,
        config_sha256: config.config_sha256(),
        upstream: train_prov.outputs.clone(),
        outputs,
    };
    write_provenance(&paths.eval_dir(&variant), &provenance)?;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

/// Render actual/predicted PGM pairs for every reconstructed test map.
pub fn run_render(config: &RunConfig, root: &Path) -> Result<Vec<String>, PipelineError> {
    let paths = StagePaths::new(root);
    let identity = config.pipeline_sha256();
    let width = model_variant(config)?;
    let variant = &width.name;

    let eval_prov = require_provenance(&paths.eval_dir(variant), "render", "eval", &identity)?;
    let synth_prov = require_provenance(&paths.dataset_dir(), "render", "synth", &identity)?;
    let manifest_path =
        verify_listed_file(&synth_prov, root, "dataset/manifest.json", "render", "synth")?;
    let manifest = read_manifest(&manifest_path)?;

    let render_dir = paths.render_dir(variant);
    std::fs::create_dir_all(&render_dir)?;
    let mut outputs = Vec::new();
    let mut rendered = Vec::new();
    for record in &eval_prov.outputs {
        if !record.path.ends_with("_pred.band") {
            continue;
        }
        let band = verify_listed_file(&eval_prov, root, &record.path, "render", "eval")?;
        let header = band.with_extension("json");
        let recon = read_prescription(&band, &header)?;
        let entry = manifest
            .scenes
            .iter()
            .find(|s| s.parcel_id == recon.parcel_id && s.phase == recon.phase)
            .ok_or_else(|| {
                PipelineError::InvalidConfig(format!(
                    "reconstructed map '{}' is not in the dataset manifest",
                    recon.parcel_id
                ))
            })?;
        let truth = read_prescription(
            &paths.dataset_dir().join(&entry.truth_band),
            &paths.dataset_dir().join(&entry.truth_header),
        )?;
        let (actual, predicted) = render_pair(&truth, &recon);
        let base = format!("{}_p{}", recon.parcel_id, recon.phase);
        let actual_path = render_dir.join(format!("{base}_actual.pgm"));
        let predicted_path = render_dir.join(format!("{base}_predicted.pgm"));
        std::fs::write(&actual_path, actual)?;
        std::fs::write(&predicted_path, predicted)?;
        outputs.push(record_file(root, &actual_path)?);
        outputs.push(record_file(root, &predicted_path)?);
        rendered.push(base);
    }
    let provenance = Provenance {
        schema_version: 1,
        stage: "render".into(),
        pipeline_sha256: identity,
        config_sha256: config.config_sha256(),
        upstream: eval_prov.outputs.clone(),
        outputs,
    };
    write_provenance(&render_dir, &provenance)?;
    Ok(rendered)
}

// ---------------------------------------------------------------------------
// green report
// ---------------------------------------------------------------------------

/// Build the energy/CO₂ report from the train reports of `variants`,
/// ordered by parameter count. The baseline variant must be among them.
pub fn run_green_report(
    config: &RunConfig,
    root: &Path,
    variants: &[String],
) -> Result<GreenReport, PipelineError> {
    let paths = StagePaths::new(root);
    let identity = config.pipeline_sha256();
    if variants.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "green-report needs at least one trained variant".into(),
        ));
    }
    let mut reports: Vec<TrainReport> = Vec::new();
    let mut upstream = Vec::new();
    for variant in variants {
        let dir = paths.train_dir(variant);
        let prov = require_provenance(&dir, "green-report", "train", &identity)?;
        let report_path = verify_listed_file(
            &prov,
            root,
            &format!("train/{variant}/train_report.json"),
            "green-report",
            "train",
        )?;
        let report: TrainReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        upstream.push(record_file(root, &report_path)?);
        reports.push(report);
    }
    reports.sort_by_key(|r| r.parameter_count);

    let samples: Vec<(String, crate::green::EnergySample)> = reports
        .iter()
        .map(|r| (r.variant.clone(), r.energy.clone()))
        .collect();
    let ef = EmissionFactor::new(
        config.energy.emission_factor,
        &config.energy.emission_factor_label,
    )?;
    let green = GreenReport::from_samples(&samples, &config.energy.baseline_variant, &ef)?;

    std::fs::create_dir_all(paths.green_dir())?;
    let json_path = paths.green_dir().join("green_report.json");
    let csv_path = paths.green_dir().join("green_report.csv");
    std::fs::write(&json_path, serde_json::to_string_pretty(&green)?)?;
    std::fs::write(&csv_path, green.to_csv())?;
    let provenance = Provenance {
        schema_version: 1,
        stage: "green-report".into(),
        pipeline_sha256: identity,
        config_sha256: config.config_sha256(),
        upstream,
        outputs: vec![
            record_file(root, &json_path)?,
            record_file(root, &csv_path)?,
        ],
    };
    write_provenance(&paths.green_dir(), &provenance)?;
    Ok(green)
}
