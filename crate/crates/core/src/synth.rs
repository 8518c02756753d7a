//! Seedable synthetic parcels: multispectral stacks plus ground-truth
//! prescription maps.
//!
//! Spectral bands are separable-Gaussian-smoothed white noise affinely
//! mapped into per-band ranges. Ground-truth nitrogen follows a documented
//! monotone-decreasing function of NDVI,
//!
//! ```text
//! N(nir, red) = max(0, N_MAX · (1 − sigmoid(NDVI_GAIN·ndvi + NDVI_OFFSET)) + noise)
//! ```
//!
//! evaluated in f64 from the emitted f32 band values, so a test can re-derive
//! the truth from the bands alone. An irregular boundary region proportional
//! to `boundary_irregularity` is marked no-data in both the stack and the
//! truth. Everything is a pure function of the spec, seed included.

use crate::raster::{
    assemble_input_stack, normalized_difference, write_prescription, write_stack, BandGrid,
    ChannelKind, ChannelSchema, PrescriptionMap, RasterStack, ValidityMask, WeatherSeries,
    WeatherVariable, DEFAULT_NODATA,
};
use crate::seeding::{derive_seed, sha256_file};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Ceiling of the generated nitrogen rates (kg·N·ha⁻¹).
pub const NITROGEN_MAX: f64 = 160.0;
/// Slope of the NDVI term inside the sigmoid.
pub const NDVI_GAIN: f64 = 6.0;
/// Offset of the NDVI term inside the sigmoid.
pub const NDVI_OFFSET: f64 = -1.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("band range {index} has min {min} >= max {max}")]
    BadBandRange { index: usize, min: f32, max: f32 },
    #[error("correlation_length {0} must be positive and at most min(height, width) = {1}")]
    BadCorrelationLength(f32, usize),
    #[error("boundary_irregularity {0} must lie in [0, 1]")]
    BadBoundaryIrregularity(f32),
    #[error("label_noise_sd {0} must be nonnegative")]
    NegativeLabelNoise(f32),
    #[error("spec provides {got} band ranges, schema has {expected} spectral channels")]
    BandRangeCount { expected: usize, got: usize },
    #[error("duplicate parcel_id '{0}' across field specs")]
    DuplicateParcelId(String),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Recipe for one synthetic parcel scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub parcel_id: String,
    pub phase: u8,
    pub height: usize,
    pub width: usize,
    /// Gaussian kernel full width in pixels (σ = correlation_length / 2).
    pub correlation_length: f32,
    /// One (min, max) per spectral channel of the schema.
    pub band_ranges: Vec<(f32, f32)>,
    /// Standard deviation of the smoothed label noise (kg·N·ha⁻¹).
    pub label_noise_sd: f32,
    /// 0 = rectangular parcel filling the grid; 1 = heavily eroded blob.
    pub boundary_irregularity: f32,
    pub seed: u64,
}

impl FieldSpec {
    pub fn validate(&self, schema: &ChannelSchema) -> Result<(), SynthError> {
        for (index, (min, max)) in self.band_ranges.iter().enumerate() {
            if min >= max {
                return Err(SynthError::BadBandRange {
                    index,
                    min: *min,
                    max: *max,
                });
            }
        }
        let min_dim = self.height.min(self.width);
        if self.correlation_length <= 0.0 || self.correlation_length > min_dim as f32 {
            return Err(SynthError::BadCorrelationLength(
                self.correlation_length,
                min_dim,
            ));
        }
        if !(0.0..=1.0).contains(&self.boundary_irregularity) {
            return Err(SynthError::BadBoundaryIrregularity(
                self.boundary_irregularity,
            ));
        }
        if self.label_noise_sd < 0.0 {
            return Err(SynthError::NegativeLabelNoise(self.label_noise_sd));
        }
        let spectral = schema.names_of_kind(ChannelKind::Spectral).len();
        if self.band_ranges.len() != spectral {
            return Err(SynthError::BandRangeCount {
                expected: spectral,
                got: self.band_ranges.len(),
            });
        }
        Ok(())
    }
}

/// A generated stack/truth pair sharing dimensions, mask, and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub stack: RasterStack,
    pub truth: PrescriptionMap,
}

// Default value ranges the generator draws weather forecasts from.
const WEATHER_RANGES: [(&str, f32, f32); 4] = [
    ("temperature", 5.0, 30.0),
    ("precipitation", 0.0, 12.0),
    ("humidity", 35.0, 95.0),
    ("wind_speed", 0.0, 14.0),
];

/// Smooth correlated field: white N(0,1) noise smoothed by a separable
/// Gaussian with σ = correlation_length/2, truncated at radius ⌈2.5σ⌉ and
/// renormalized at the edges.
fn smooth_field(rng: &mut ChaCha20Rng, h: usize, w: usize, correlation_length: f32) -> Vec<f32> {
    let mut noise = vec![0.0f32; h * w];
    for v in noise.iter_mut() {
        *v = rng.sample::<f32, _>(StandardNormal);
    }
    let sigma = (correlation_length as f64 / 2.0).max(0.25);
    let radius = (2.5 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    // Rows, then columns. Edge taps fall outside the grid; renormalizing by
    // the in-bounds kernel mass keeps the field's scale uniform.
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f64;
            let mut mass = 0.0f64;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = c as isize + ki as isize - radius;
                if cc >= 0 && cc < w as isize {
                    acc += kv * noise[r * w + cc as usize] as f64;
                    mass += kv;
                }
            }
            tmp[r * w + c] = (acc / mass) as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f64;
            let mut mass = 0.0f64;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = r as isize + ki as isize - radius;
                if rr >= 0 && rr < h as isize {
                    acc += kv * tmp[rr as usize * w + c] as f64;
                    mass += kv;
                }
            }
            out[r * w + c] = (acc / mass) as f32;
        }
    }
    out
}

/// Affinely map a field onto [lo, hi], clamping away float round-off.
fn map_to_range(field: &[f32], lo: f32, hi: f32) -> Vec<f32> {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in field {
        min = min.min(v);
        max = max.max(v);
    }
    if max <= min {
        let mid = 0.5 * (lo + hi);
        return vec![mid; field.len()];
    }
    field
        .iter()
        .map(|&v| {
            let t = (v - min) / (max - min);
            (lo + (hi - lo) * t).clamp(lo, hi)
        })
        .collect()
}

/// Standardize a field to empirical mean 0, sd 1 (population). Returns zeros
/// when the field is constant.
fn standardize_field(field: &[f32]) -> Vec<f32> {
    let n = field.len() as f64;
    let mean = field.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = field
        .iter()
        .map(|v| {
            let d = *v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return vec![0.0; field.len()];
    }
    field
        .iter()
        .map(|&v| ((v as f64 - mean) / sd) as f32)
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The documented ground-truth nitrogen rate for one pixel, computed in f64
/// from the emitted f32 band values.
pub fn truth_from_bands(nir: f32, red: f32, noise: f64) -> f64 {
    let ndvi = normalized_difference(nir, red) as f64;
    let base = NITROGEN_MAX * (1.0 - sigmoid(NDVI_GAIN * ndvi + NDVI_OFFSET));
    (base + noise).max(0.0)
}

/// Irregular parcel boundary: pixels whose wiggled radial distance from the
/// grid center exceeds a threshold shrinking with `irregularity` are
/// invalid. `irregularity` of 0 keeps every pixel.
fn boundary_mask(h: usize, w: usize, irregularity: f32, wiggle: &[f32]) -> Vec<bool> {
    if irregularity <= 0.0 {
        return vec![true; h * w];
    }
    let beta = irregularity as f64;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let ry = (h as f64) / 2.0;
    let rx = (w as f64) / 2.0;
    let mut mask = vec![true; h * w];
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 - cy) / ry;
            let dx = (c as f64 - cx) / rx;
            let rho = (dy * dy + dx * dx).sqrt();
            let threshold = 1.45 - 0.6 * beta + 0.3 * beta * wiggle[r * w + c] as f64;
            if rho > threshold {
                mask[r * w + c] = false;
            }
        }
    }
    mask
}

/// Generate one scene. Deterministic given the spec (seed included); all
/// random streams derive from `spec.seed` with per-purpose tags.
pub fn generate_scene(
    spec: &FieldSpec,
    schema: &ChannelSchema,
) -> Result<SyntheticScene, SynthError> {
    spec.validate(schema)?;
    let (h, w) = (spec.height, spec.width);
    let spectral_names = schema.names_of_kind(ChannelKind::Spectral);

    // Spectral bands.
    let mut bands: Vec<Vec<f32>> = Vec::with_capacity(spectral_names.len());
    for (i, name) in spectral_names.iter().enumerate() {
        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, &format!("band/{name}")));
        let field = smooth_field(&mut rng, h, w, spec.correlation_length);
        let (lo, hi) = spec.band_ranges[i];
        bands.push(map_to_range(&field, lo, hi));
    }

    // Boundary mask shared by stack and truth.
    let mut boundary_rng = ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, "boundary"));
    let wiggle = standardize_field(&smooth_field(
        &mut boundary_rng,
        h,
        w,
        spec.correlation_length,
    ));
    let valid = boundary_mask(h, w, spec.boundary_irregularity, &wiggle);

    // Label noise: smoothed, standardized, scaled to the requested sd.
    let noise: Vec<f64> = if spec.label_noise_sd > 0.0 {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, "label-noise"));
        standardize_field(&smooth_field(&mut rng, h, w, spec.correlation_length))
            .iter()
            .map(|&v| v as f64 * spec.label_noise_sd as f64)
            .collect()
    } else {
        vec![0.0; h * w]
    };

    // Weather forecasts: one draw per variable and interval.
    let mut weather_rng = ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, "weather"));
    let weather = WeatherSeries {
        variables: WEATHER_RANGES
            .iter()
            .map(|(name, lo, hi)| WeatherVariable {
                name: (*name).to_string(),
                values: [
                    weather_rng.gen_range(*lo..*hi),
                    weather_rng.gen_range(*lo..*hi),
                    weather_rng.gen_range(*lo..*hi),
                ],
            })
            .collect(),
    };

    // Assemble the stack from masked bands; invalid pixels read as 0.
    let spectral: Vec<(BandGrid, ValidityMask)> = bands
        .iter()
        .map(|band| {
            let values = band
                .iter()
                .zip(&valid)
                .map(|(v, ok)| if *ok { *v } else { 0.0 })
                .collect();
            Ok((
                BandGrid::new(h, w, values)?,
                ValidityMask::new(h, w, valid.clone())?,
            ))
        })
        .collect::<Result<_, crate::raster::RasterError>>()?;
    let index_names: Vec<&str> = schema.names_of_kind(ChannelKind::Index);
    let stack = assemble_input_stack(
        &spectral,
        &index_names,
        &weather,
        schema,
        &spec.parcel_id,
        spec.phase,
    )?;

    // Ground truth from the *unmasked* band values so the documented formula
    // applies uniformly; invalid pixels are zeroed afterwards.
    let nir_idx = spectral_names
        .iter()
        .position(|n| *n == "nir")
        .unwrap_or(0);
    let red_idx = spectral_names
        .iter()
        .position(|n| *n == "red")
        .unwrap_or_else(|| if spectral_names.len() > 1 { 1 } else { 0 });
    let mut truth_values = vec![0.0f32; h * w];
    for i in 0..h * w {
        if valid[i] {
            truth_values[i] = truth_from_bands(bands[nir_idx][i], bands[red_idx][i], noise[i]) as f32;
        }
    }
    let truth = PrescriptionMap::new(
        BandGrid::new(h, w, truth_values)?,
        ValidityMask::new(h, w, valid)?,
        spec.parcel_id.clone(),
        spec.phase,
    )?;

    Ok(SyntheticScene { stack, truth })
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneFiles {
    pub parcel_id: String,
    pub phase: u8,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub stack_band: String,
    pub stack_header: String,
    pub truth_band: String,
    pub truth_header: String,
    pub stack_sha256: String,
    pub truth_sha256: String,
}

/// Index of a generated dataset: file names are relative to the manifest's
/// directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub channel_schema: ChannelSchema,
    pub scenes: Vec<SceneFiles>,
}

/// Generate and write one scene per spec plus a manifest with checksums.
/// Parcel ids must be unique across specs.
pub fn generate_dataset(
    specs: &[FieldSpec],
    schema: &ChannelSchema,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    for (i, spec) in specs.iter().enumerate() {
        if specs[..i].iter().any(|s| s.parcel_id == spec.parcel_id) {
            return Err(SynthError::DuplicateParcelId(spec.parcel_id.clone()));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut scenes = Vec::with_capacity(specs.len());
    for spec in specs {
        let scene = generate_scene(spec, schema)?;
        let base = format!("{}_p{}", spec.parcel_id, spec.phase);
        let stack_band = format!("{base}.band");
        let stack_header = format!("{base}.json");
        let truth_band = format!("{base}_truth.band");
        let truth_header = format!("{base}_truth.json");
        write_stack(
            &scene.stack,
            &out_dir.join(&stack_band),
            &out_dir.join(&stack_header),
            DEFAULT_NODATA,
        )?;
        write_prescription(
            &scene.truth,
            &out_dir.join(&truth_band),
            &out_dir.join(&truth_header),
            DEFAULT_NODATA,
        )?;
        scenes.push(SceneFiles {
            parcel_id: spec.parcel_id.clone(),
            phase: spec.phase,
            seed: spec.seed,
            height: spec.height,
            width: spec.width,
            stack_sha256: sha256_file(&out_dir.join(&stack_band))?,
            truth_sha256: sha256_file(&out_dir.join(&truth_band))?,
            stack_band,
            stack_header,
            truth_band,
            truth_header,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_VERSION,
        channel_schema: schema.clone(),
        scenes,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, SynthError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Load every scene listed in a manifest, verifying payload checksums.
pub fn load_dataset(
    manifest: &DatasetManifest,
    dir: &Path,
) -> Result<Vec<SyntheticScene>, SynthError> {
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let stack_band = dir.join(&entry.stack_band);
        let truth_band = dir.join(&entry.truth_band);
        for (path, expected) in [
            (&stack_band, &entry.stack_sha256),
            (&truth_band, &entry.truth_sha256),
        ] {
            let actual = sha256_file(path)?;
            if &actual != expected {
                return Err(SynthError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!(
                        "checksum mismatch for {}: manifest {expected}, file {actual}",
                        path.display()
                    ),
                )));
            }
        }
        let stack = crate::raster::read_stack(&stack_band, &dir.join(&entry.stack_header))?;
        let truth =
            crate::raster::read_prescription(&truth_band, &dir.join(&entry.truth_header))?;
        scenes.push(SyntheticScene { stack, truth });
    }
    Ok(scenes)
}

/// Spectral (min, max) defaults matching a 12-bit instrument's plausible
/// reflectance spread per band.
pub fn default_band_ranges() -> Vec<(f32, f32)> {
    vec![
        (600.0, 4000.0),  // nir
        (200.0, 2500.0),  // red
        (250.0, 2800.0),  // green
        (150.0, 2200.0),  // blue
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> FieldSpec {
        FieldSpec {
            parcel_id: format!("parcel-{seed}"),
            phase: 2,
            height: 24,
            width: 24,
            correlation_length: 6.0,
            band_ranges: default_band_ranges(),
            label_noise_sd: 5.0,
            boundary_irregularity: 0.4,
            seed,
        }
    }

    #[test]
    fn same_spec_same_seed_is_bit_identical() {
        let schema = ChannelSchema::default_18();
        let a = generate_scene(&spec(7), &schema).unwrap();
        let b = generate_scene(&spec(7), &schema).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_boundary_irregularity_keeps_all_pixels() {
        let schema = ChannelSchema::default_18();
        let mut s = spec(3);
        s.boundary_irregularity = 0.0;
        let scene = generate_scene(&s, &schema).unwrap();
        assert_eq!(scene.stack.mask.count_valid(), 24 * 24);
        assert_eq!(scene.truth.mask.count_valid(), 24 * 24);
    }

    #[test]
    fn zero_label_noise_truth_rederives_from_bands() {
        let schema = ChannelSchema::default_18();
        let mut s = spec(11);
        s.label_noise_sd = 0.0;
        let scene = generate_scene(&s, &schema).unwrap();
        let nir = scene.stack.channel_by_name("nir").unwrap();
        let red = scene.stack.channel_by_name("red").unwrap();
        // Independent re-derivation of the documented formula.
        for r in 0..scene.truth.height() {
            for c in 0..scene.truth.width() {
                if !scene.truth.mask.get(r, c) {
                    continue;
                }
                let ndvi =
                    (nir.get(r, c) as f64 - red.get(r, c) as f64) / (nir.get(r, c) as f64 + red.get(r, c) as f64);
                let expected =
                    (160.0 * (1.0 - 1.0 / (1.0 + (-(6.0 * ndvi - 1.5)).exp()))).max(0.0);
                let got = scene.truth.grid.get(r, c) as f64;
                assert!(
                    (got - expected).abs() < 1e-5,
                    "truth at ({r},{c}) = {got}, formula gives {expected}"
                );
            }
        }
    }

    #[test]
    fn spectral_values_stay_in_band_ranges() {
        let schema = ChannelSchema::default_18();
        for seed in [1u64, 2, 3] {
            let s = spec(seed);
            let scene = generate_scene(&s, &schema).unwrap();
            for (i, name) in ["nir", "red", "green", "blue"].iter().enumerate() {
                let (lo, hi) = s.band_ranges[i];
                let band = scene.stack.channel_by_name(name).unwrap();
                for r in 0..scene.stack.height() {
                    for c in 0..scene.stack.width() {
                        if scene.stack.mask.get(r, c) {
                            let v = band.get(r, c);
                            assert!(v >= lo && v <= hi, "{name} value {v} outside [{lo},{hi}]");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn truth_valid_entries_are_nonnegative_and_masks_agree() {
        let schema = ChannelSchema::default_18();
        let scene = generate_scene(&spec(5), &schema).unwrap();
        assert_eq!(scene.stack.mask, scene.truth.mask);
        for r in 0..scene.truth.height() {
            for c in 0..scene.truth.width() {
                if scene.truth.mask.get(r, c) {
                    assert!(scene.truth.grid.get(r, c) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let schema = ChannelSchema::default_18();
        for trial in 0..10u64 {
            let a = generate_scene(&spec(100 + trial), &schema).unwrap();
            let b = generate_scene(&spec(200 + trial), &schema).unwrap();
            assert_ne!(
                a.stack.channel(0).values(),
                b.stack.channel(0).values(),
                "seeds {} and {} produced identical nir bands",
                100 + trial,
                200 + trial
            );
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let schema = ChannelSchema::default_18();
        let mut s = spec(1);
        s.correlation_length = 100.0;
        assert!(matches!(
            generate_scene(&s, &schema),
            Err(SynthError::BadCorrelationLength(..))
        ));
        let mut s = spec(1);
        s.band_ranges[2] = (5.0, 5.0);
        assert!(matches!(
            generate_scene(&s, &schema),
            Err(SynthError::BadBandRange { .. })
        ));
        let mut s = spec(1);
        s.band_ranges.pop();
        assert!(matches!(
            generate_scene(&s, &schema),
            Err(SynthError::BandRangeCount { .. })
        ));
    }

    #[test]
    fn dataset_manifest_lists_every_scene() {
        let dir = tempfile::tempdir().unwrap();
        let schema = ChannelSchema::default_18();
        let specs: Vec<FieldSpec> = (0..35).map(|i| {
            let mut s = spec(i);
            s.height = 12;
            s.width = 12;
            s.correlation_length = 4.0;
            s
        }).collect();
        let manifest = generate_dataset(&specs, &schema, dir.path()).unwrap();
        assert_eq!(manifest.scenes.len(), 35);
        // Loading back verifies checksums and reconstructs the scenes.
        let scenes = load_dataset(&manifest, dir.path()).unwrap();
        assert_eq!(scenes.len(), 35);
        assert_eq!(scenes[3].stack.parcel_id, "parcel-3");
    }

    #[test]
    fn empty_spec_list_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let schema = ChannelSchema::default_18();
        let manifest = generate_dataset(&[], &schema, dir.path()).unwrap();
        assert!(manifest.scenes.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1); // just the manifest
    }

    #[test]
    fn duplicate_parcel_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let schema = ChannelSchema::default_18();
        let mut a = spec(1);
        let mut b = spec(2);
        a.parcel_id = "same".into();
        b.parcel_id = "same".into();
        assert!(matches!(
            generate_dataset(&[a, b], &schema, dir.path()),
            Err(SynthError::DuplicateParcelId(_))
        ));
    }

    #[test]
    fn checksum_mismatch_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let schema = ChannelSchema::default_18();
        let mut s = spec(9);
        s.height = 12;
        s.width = 12;
        s.correlation_length = 4.0;
        let manifest = generate_dataset(&[s], &schema, dir.path()).unwrap();
        let path = dir.path().join(&manifest.scenes[0].stack_band);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] ^= 0x5a;
        std::fs::write(&path, bytes).unwrap();
        assert!(load_dataset(&manifest, dir.path()).is_err());
    }
}
