//! Scene-to-patch preprocessing: outlier removal, patch extraction,
//! leakage-safe splitting, standardization, and flip augmentation.
//!
//! Stride-1 8×8 patches from one scene overlap almost completely, so a
//! pixel-level split would leak test content into training. Test isolation
//! therefore happens at parcel granularity before anything else; the
//! quantile stratification (by mean valid label) only shapes the remaining
//! train/validation partition.

use crate::raster::PATCH_SIZE;
use crate::seeding::derive_seed;
use crate::synth::SyntheticScene;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("IQR filter needs at least 4 scenes, got {0}")]
    TooFewScenes(usize),
    #[error("IQR filter dropped every scene")]
    AllScenesDropped,
    #[error("scene '{0}' has no valid prescription pixels")]
    SceneFullyMasked(String),
    #[error("scene '{id}' is {h}x{w}, smaller than the {patch}x{patch} patch size")]
    SceneTooSmall {
        id: String,
        h: usize,
        w: usize,
        patch: usize,
    },
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios([f64; 3]),
    #[error("bins must be positive")]
    ZeroBins,
    #[error("no patches to split")]
    NoPatches,
    #[error("cannot isolate a test set: {0}")]
    TestIsolation(String),
    #[error("standardizer fitted on an empty patch list")]
    EmptyFit,
    #[error("patch channel count {got} does not match standardizer ({expected})")]
    ChannelCount { expected: usize, got: usize },
    #[error("split manifest references unknown patch origin {0:?}")]
    UnknownOrigin(PatchOrigin),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Provenance of a patch: scene identity plus the window's top-left corner.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub parcel_id: String,
    pub phase: u8,
    pub row: u32,
    pub col: u32,
}

/// An 8×8 training unit: C input channels, a label window, and the label's
/// validity mask. Input pixels carry their ingested values (0 at no-data
/// positions); the label mask is what the loss consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub channels: usize,
    /// C·8·8 values, channel-major.
    pub input: Vec<f32>,
    /// 8·8 label values.
    pub label: Vec<f32>,
    /// 8·8 validity flags for the label window.
    pub label_mask: Vec<bool>,
    pub origin: PatchOrigin,
}

impl LabeledPatch {
    #[inline]
    pub fn input_at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.input[channel * PATCH_PIXELS + row * PATCH_SIZE + col]
    }

    #[inline]
    pub fn label_at(&self, row: usize, col: usize) -> f32 {
        self.label[row * PATCH_SIZE + col]
    }

    /// Mean label over valid pixels; `None` when every pixel is masked.
    pub fn mean_valid_label(&self) -> Option<f64> {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (v, m) in self.label.iter().zip(&self.label_mask) {
            if *m {
                sum += *v as f64;
                n += 1;
            }
        }
        if n == 0 {
            None
        } else {
            Some(sum / n as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// IQR outlier filter
// ---------------------------------------------------------------------------

/// Linear-interpolation quantile of a sorted slice (the common "type 7"
/// definition: index (n−1)·q).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&q));
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mean valid prescription value of a scene, the statistic the outlier
/// filter works on.
pub fn scene_mean_prescription(scene: &SyntheticScene) -> Result<f64, PreprocessError> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (v, m) in scene
        .truth
        .grid
        .values()
        .iter()
        .zip(scene.truth.mask.flags())
    {
        if *m {
            sum += *v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(PreprocessError::SceneFullyMasked(
            scene.truth.parcel_id.clone(),
        ));
    }
    Ok(sum / n as f64)
}

/// Drop scenes whose mean prescription falls outside the Tukey fences
/// [Q1 − k·IQR, Q3 + k·IQR] (closed interval; boundary values are kept).
/// Order is preserved within both returned lists.
pub fn iqr_filter(
    scenes: Vec<SyntheticScene>,
    multiplier: f64,
) -> Result<(Vec<SyntheticScene>, Vec<SyntheticScene>), PreprocessError> {
    if scenes.len() < 4 {
        return Err(PreprocessError::TooFewScenes(scenes.len()));
    }
    let stats: Vec<f64> = scenes
        .iter()
        .map(scene_mean_prescription)
        .collect::<Result<_, _>>()?;
    let mut sorted = stats.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("means are finite"));
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo = q1 - multiplier * iqr;
    let hi = q3 + multiplier * iqr;

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (scene, stat) in scenes.into_iter().zip(stats) {
        if stat >= lo && stat <= hi {
            kept.push(scene);
        } else {
            dropped.push(scene);
        }
    }
    if kept.is_empty() {
        return Err(PreprocessError::AllScenesDropped);
    }
    Ok((kept, dropped))
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// Extract every stride-1 8×8 window in row-major origin order, skipping
/// windows whose label is entirely invalid.
pub fn extract_patches(scene: &SyntheticScene) -> Result<Vec<LabeledPatch>, PreprocessError> {
    let h = scene.stack.height();
    let w = scene.stack.width();
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return Err(PreprocessError::SceneTooSmall {
            id: scene.stack.parcel_id.clone(),
            h,
            w,
            patch: PATCH_SIZE,
        });
    }
    let channels = scene.stack.channels().len();
    let mut patches = Vec::with_capacity((h - PATCH_SIZE + 1) * (w - PATCH_SIZE + 1));
    for row in 0..=(h - PATCH_SIZE) {
        for col in 0..=(w - PATCH_SIZE) {
            let mut label = Vec::with_capacity(PATCH_PIXELS);
            let mut label_mask = Vec::with_capacity(PATCH_PIXELS);
            let mut any_valid = false;
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    let valid = scene.truth.mask.get(row + r, col + c);
                    any_valid |= valid;
                    label.push(scene.truth.grid.get(row + r, col + c));
                    label_mask.push(valid);
                }
            }
            if !any_valid {
                continue;
            }
            let mut input = Vec::with_capacity(channels * PATCH_PIXELS);
            for ch in 0..channels {
                let grid = scene.stack.channel(ch);
                for r in 0..PATCH_SIZE {
                    for c in 0..PATCH_SIZE {
                        input.push(grid.get(row + r, col + c));
                    }
                }
            }
            patches.push(LabeledPatch {
                channels,
                input,
                label,
                label_mask,
                origin: PatchOrigin {
                    parcel_id: scene.stack.parcel_id.clone(),
                    phase: scene.stack.phase,
                    row: row as u32,
                    col: col as u32,
                },
            });
        }
    }
    Ok(patches)
}

// ---------------------------------------------------------------------------
// Stratified split with parcel-level test isolation
// ---------------------------------------------------------------------------

/// Index-based split over a patch pool. Partitions are disjoint by origin
/// and no test parcel contributes to train or validation.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub bins: usize,
    pub bin_edges: Vec<f64>,
    pub test_parcels: Vec<String>,
}

/// Serializable form of a split: per-partition origin lists.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub bins: usize,
    pub bin_edges: Vec<f64>,
    pub test_parcels: Vec<String>,
    pub train: Vec<PatchOrigin>,
    pub validation: Vec<PatchOrigin>,
    pub test: Vec<PatchOrigin>,
}

impl DatasetSplit {
    pub fn to_manifest(&self, pool: &[LabeledPatch]) -> SplitManifest {
        let origins = |idxs: &[usize]| idxs.iter().map(|i| pool[*i].origin.clone()).collect();
        SplitManifest {
            schema_version: 1,
            ratios: self.ratios,
            seed: self.seed,
            bins: self.bins,
            bin_edges: self.bin_edges.clone(),
            test_parcels: self.test_parcels.clone(),
            train: origins(&self.train),
            validation: origins(&self.validation),
            test: origins(&self.test),
        }
    }

    pub fn from_manifest(
        manifest: &SplitManifest,
        pool: &[LabeledPatch],
    ) -> Result<Self, PreprocessError> {
        let by_origin: HashMap<&PatchOrigin, usize> = pool
            .iter()
            .enumerate()
            .map(|(i, p)| (&p.origin, i))
            .collect();
        let resolve = |origins: &[PatchOrigin]| -> Result<Vec<usize>, PreprocessError> {
            origins
                .iter()
                .map(|o| {
                    by_origin
                        .get(o)
                        .copied()
                        .ok_or_else(|| PreprocessError::UnknownOrigin(o.clone()))
                })
                .collect()
        };
        Ok(Self {
            train: resolve(&manifest.train)?,
            validation: resolve(&manifest.validation)?,
            test: resolve(&manifest.test)?,
            ratios: manifest.ratios,
            seed: manifest.seed,
            bins: manifest.bins,
            bin_edges: manifest.bin_edges.clone(),
            test_parcels: manifest.test_parcels.clone(),
        })
    }
}

/// Split patches into train/validation/test.
///
/// Whole parcels go to the test pool (seeded shuffle, greedy) until at least
/// `ratios[2]` of all patches are covered. The remainder is binned into
/// `bins` quantile bins by mean valid label and split
/// `ratios[0] : ratios[1]` within each bin. Deterministic given the seed.
pub fn stratified_split(
    patches: &[LabeledPatch],
    ratios: [f64; 3],
    seed: u64,
    bins: usize,
) -> Result<DatasetSplit, PreprocessError> {
    if patches.is_empty() {
        return Err(PreprocessError::NoPatches);
    }
    if bins == 0 {
        return Err(PreprocessError::ZeroBins);
    }
    if ratios.iter().any(|r| *r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PreprocessError::BadRatios(ratios));
    }

    // Group by parcel in first-seen order.
    let mut parcel_order: Vec<String> = Vec::new();
    let mut parcel_patches: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, patch) in patches.iter().enumerate() {
        let entry = parcel_patches
            .entry(patch.origin.parcel_id.clone())
            .or_default();
        if entry.is_empty() {
            parcel_order.push(patch.origin.parcel_id.clone());
        }
        entry.push(i);
    }
    if parcel_order.len() < 2 {
        return Err(PreprocessError::TestIsolation(format!(
            "need at least 2 parcels, got {}",
            parcel_order.len()
        )));
    }

    // Test isolation first: whole parcels until coverage reaches the target.
    let mut shuffled = parcel_order.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "split/test-parcels"));
    shuffled.shuffle(&mut rng);
    let test_target = ratios[2] * patches.len() as f64;
    let mut test_parcels = Vec::new();
    let mut test: Vec<usize> = Vec::new();
    for parcel in &shuffled {
        if (test.len() as f64) >= test_target {
            break;
        }
        test_parcels.push(parcel.clone());
        test.extend(&parcel_patches[parcel]);
    }
    if test_parcels.len() == shuffled.len() {
        return Err(PreprocessError::TestIsolation(format!(
            "all {} parcels were consumed by the test target",
            shuffled.len()
        )));
    }
    test_parcels.sort();
    test.sort_unstable();

    // Stratify the remainder by mean valid label.
    let remainder: Vec<usize> = (0..patches.len())
        .filter(|i| !test_parcels.contains(&patches[*i].origin.parcel_id))
        .collect();
    let stats: Vec<f64> = remainder
        .iter()
        .map(|i| {
            patches[*i]
                .mean_valid_label()
                .expect("extraction drops all-invalid patches")
        })
        .collect();
    let mut sorted_stats = stats.clone();
    sorted_stats.sort_by(|a, b| a.partial_cmp(b).expect("finite stats"));
    let mut bin_edges: Vec<f64> = (1..bins)
        .map(|i| quantile_sorted(&sorted_stats, i as f64 / bins as f64))
        .collect();
    bin_edges.dedup();

    // Upper-inclusive binning: bin index = number of edges strictly below.
    let bin_of = |stat: f64| bin_edges.iter().filter(|e| **e < stat).count();
    let mut binned: Vec<Vec<usize>> = vec![Vec::new(); bin_edges.len() + 1];
    for (i, stat) in remainder.iter().zip(&stats) {
        binned[bin_of(*stat)].push(*i);
    }

    let train_frac = ratios[0] / (ratios[0] + ratios[1]);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (b, bin) in binned.iter().enumerate() {
        if bin.is_empty() {
            continue;
        }
        let mut idxs = bin.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("split/bin-{b}")));
        idxs.shuffle(&mut rng);
        let take = ((idxs.len() as f64) * train_frac).round() as usize;
        let take = take.min(idxs.len());
        train.extend(&idxs[..take]);
        validation.extend(&idxs[take..]);
    }
    train.sort_unstable();
    validation.sort_unstable();

    Ok(DatasetSplit {
        train,
        validation,
        test,
        ratios,
        seed,
        bins,
        bin_edges,
        test_parcels,
    })
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Divide by the population standard deviation (conventional z-score).
    Stddev,
    /// Divide by the population variance.
    Variance,
}

pub const STANDARDIZER_EPSILON: f64 = 1e-8;

/// Per-channel affine transform fitted on the training partition only.
/// Labels get their own mean/scale, computed over valid label pixels;
/// masked label pixels are excluded from fitting and never rescaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub channel_mean: Vec<f64>,
    pub channel_scale: Vec<f64>,
    pub label_mean: f64,
    pub label_scale: f64,
    pub mode: ScaleMode,
    /// Identifier of the partition the statistics came from.
    pub fitted_on: String,
    /// Channels whose spread fell below epsilon and were clamped.
    pub clamped_channels: Vec<String>,
}

pub fn fit_standardizer(
    train: &[&LabeledPatch],
    mode: ScaleMode,
    fitted_on: &str,
    channel_names: &[String],
) -> Result<Standardizer, PreprocessError> {
    let first = train.first().ok_or(PreprocessError::EmptyFit)?;
    let channels = first.channels;

    let mut sums = vec![0.0f64; channels];
    let mut sq_sums = vec![0.0f64; channels];
    let mut count = 0usize;
    let mut label_sum = 0.0f64;
    let mut label_sq = 0.0f64;
    let mut label_count = 0usize;
    for patch in train {
        if patch.channels != channels {
            return Err(PreprocessError::ChannelCount {
                expected: channels,
                got: patch.channels,
            });
        }
        for ch in 0..channels {
            let slice = &patch.input[ch * PATCH_PIXELS..(ch + 1) * PATCH_PIXELS];
            for v in slice {
                sums[ch] += *v as f64;
                sq_sums[ch] += (*v as f64) * (*v as f64);
            }
        }
        count += PATCH_PIXELS;
        for (v, m) in patch.label.iter().zip(&patch.label_mask) {
            if *m {
                label_sum += *v as f64;
                label_sq += (*v as f64) * (*v as f64);
                label_count += 1;
            }
        }
    }
    if count == 0 || label_count == 0 {
        return Err(PreprocessError::EmptyFit);
    }

    let scale_of = |mean: f64, sq: f64, n: usize| -> f64 {
        let var = (sq / n as f64 - mean * mean).max(0.0);
        match mode {
            ScaleMode::Stddev => var.sqrt(),
            ScaleMode::Variance => var,
        }
    };

    let mut channel_mean = Vec::with_capacity(channels);
    let mut channel_scale = Vec::with_capacity(channels);
    let mut clamped = Vec::new();
    for ch in 0..channels {
        let mean = sums[ch] / count as f64;
        let mut scale = scale_of(mean, sq_sums[ch], count);
        if scale < STANDARDIZER_EPSILON {
            scale = STANDARDIZER_EPSILON;
            let name = channel_names
                .get(ch)
                .cloned()
                .unwrap_or_else(|| format!("channel-{ch}"));
            log::warn!("constant channel '{name}': scale clamped to {STANDARDIZER_EPSILON}");
            clamped.push(name);
        }
        channel_mean.push(mean);
        channel_scale.push(scale);
    }

    let label_mean = label_sum / label_count as f64;
    let mut label_scale = scale_of(label_mean, label_sq, label_count);
    if label_scale < STANDARDIZER_EPSILON {
        label_scale = STANDARDIZER_EPSILON;
        log::warn!("constant labels: scale clamped to {STANDARDIZER_EPSILON}");
        clamped.push("label".into());
    }

    Ok(Standardizer {
        channel_mean,
        channel_scale,
        label_mean,
        label_scale,
        mode,
        fitted_on: fitted_on.to_string(),
        clamped_channels: clamped,
    })
}

impl Standardizer {
    /// (x − mean)/scale on every input pixel; labels likewise but only at
    /// valid pixels — masked label values pass through untouched.
    pub fn apply(&self, patch: &LabeledPatch) -> Result<LabeledPatch, PreprocessError> {
        if patch.channels != self.channel_mean.len() {
            return Err(PreprocessError::ChannelCount {
                expected: self.channel_mean.len(),
                got: patch.channels,
            });
        }
        let mut input = Vec::with_capacity(patch.input.len());
        for ch in 0..patch.channels {
            let mean = self.channel_mean[ch];
            let scale = self.channel_scale[ch];
            for v in &patch.input[ch * PATCH_PIXELS..(ch + 1) * PATCH_PIXELS] {
                input.push(((*v as f64 - mean) / scale) as f32);
            }
        }
        let label = patch
            .label
            .iter()
            .zip(&patch.label_mask)
            .map(|(v, m)| {
                if *m {
                    ((*v as f64 - self.label_mean) / self.label_scale) as f32
                } else {
                    *v
                }
            })
            .collect();
        Ok(LabeledPatch {
            channels: patch.channels,
            input,
            label,
            label_mask: patch.label_mask.clone(),
            origin: patch.origin.clone(),
        })
    }

    /// Inverse of the label transform, for turning standardized predictions
    /// back into kg·N·ha⁻¹.
    pub fn destandardize_label(&self, value: f32) -> f32 {
        (value as f64 * self.label_scale + self.label_mean) as f32
    }
}

// ---------------------------------------------------------------------------
// Flip augmentation
// ---------------------------------------------------------------------------

/// Horizontal and vertical flips, each applied independently with
/// probability 0.5; input, label, and mask flip together. Deterministic
/// given the seed (horizontal is drawn first).
pub fn augment_flips(patch: &LabeledPatch, seed: u64) -> LabeledPatch {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let flip_h = rng.next_u32() & 1 == 1;
    let flip_v = rng.next_u32() & 1 == 1;
    apply_flips(patch, flip_h, flip_v)
}

/// Deterministic flip application; exposed for involution checks.
pub fn apply_flips(patch: &LabeledPatch, flip_h: bool, flip_v: bool) -> LabeledPatch {
    if !flip_h && !flip_v {
        return patch.clone();
    }
    let map = |r: usize, c: usize| -> (usize, usize) {
        let rr = if flip_v { PATCH_SIZE - 1 - r } else { r };
        let cc = if flip_h { PATCH_SIZE - 1 - c } else { c };
        (rr, cc)
    };
    let mut input = vec![0.0f32; patch.input.len()];
    for ch in 0..patch.channels {
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                let (rr, cc) = map(r, c);
                input[ch * PATCH_PIXELS + r * PATCH_SIZE + c] =
                    patch.input[ch * PATCH_PIXELS + rr * PATCH_SIZE + cc];
            }
        }
    }
    let mut label = vec![0.0f32; PATCH_PIXELS];
    let mut label_mask = vec![false; PATCH_PIXELS];
    for r in 0..PATCH_SIZE {
        for c in 0..PATCH_SIZE {
            let (rr, cc) = map(r, c);
            label[r * PATCH_SIZE + c] = patch.label[rr * PATCH_SIZE + cc];
            label_mask[r * PATCH_SIZE + c] = patch.label_mask[rr * PATCH_SIZE + cc];
        }
    }
    LabeledPatch {
        channels: patch.channels,
        input,
        label,
        label_mask,
        origin: patch.origin.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BandGrid, ChannelSchema, PrescriptionMap, ValidityMask};
    use crate::synth::{default_band_ranges, generate_scene, FieldSpec};

    fn scene_with_mean(id: &str, mean: f32, h: usize, w: usize) -> SyntheticScene {
        let spec = FieldSpec {
            parcel_id: id.to_string(),
            phase: 2,
            height: h,
            width: w,
            correlation_length: 3.0,
            band_ranges: default_band_ranges(),
            label_noise_sd: 0.0,
            boundary_irregularity: 0.0,
            seed: 1,
        };
        let mut scene = generate_scene(&spec, &ChannelSchema::default_18()).unwrap();
        // Overwrite the truth with a constant so its mean is exactly `mean`.
        scene.truth = PrescriptionMap::new(
            BandGrid::filled(h, w, mean),
            ValidityMask::all_valid(h, w),
            id.to_string(),
            2,
        )
        .unwrap();
        scene
    }

    #[test]
    fn iqr_drops_the_outlier_scene() {
        // Oracle: sorted means {10..18, 500}; Q1 = 12.25, Q3 = 16.75 by
        // linear interpolation, fences [5.5, 23.5]; only 500 is outside.
        let means = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0, 500.0];
        let scenes = means
            .iter()
            .enumerate()
            .map(|(i, m)| scene_with_mean(&format!("s{i}"), *m, 8, 8))
            .collect();
        let (kept, dropped) = iqr_filter(scenes, 1.5).unwrap();
        assert_eq!(kept.len(), 9);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].truth.parcel_id, "s9");
        // Order preserved.
        for (i, scene) in kept.iter().enumerate() {
            assert_eq!(scene.truth.parcel_id, format!("s{i}"));
        }
    }

    #[test]
    fn iqr_keeps_everything_when_means_are_equal() {
        let scenes = (0..5)
            .map(|i| scene_with_mean(&format!("s{i}"), 42.0, 8, 8))
            .collect();
        let (kept, dropped) = iqr_filter(scenes, 1.5).unwrap();
        assert_eq!(kept.len(), 5);
        assert!(dropped.is_empty());
    }

    #[test]
    fn iqr_requires_four_scenes() {
        let scenes = (0..3)
            .map(|i| scene_with_mean(&format!("s{i}"), 10.0, 8, 8))
            .collect::<Vec<_>>();
        assert!(matches!(
            iqr_filter(scenes, 1.5),
            Err(PreprocessError::TooFewScenes(3))
        ));
    }

    fn masked_scene(id: &str, h: usize, w: usize, invalid: &[(usize, usize)]) -> SyntheticScene {
        let mut scene = scene_with_mean(id, 50.0, h, w);
        let mut mask = ValidityMask::all_valid(h, w);
        let mut grid = scene.truth.grid.clone();
        for (r, c) in invalid {
            mask.set(*r, *c, false);
            grid.set(*r, *c, 0.0);
        }
        scene.truth = PrescriptionMap::new(grid, mask, id.to_string(), 2).unwrap();
        scene
    }

    #[test]
    fn extraction_counts_follow_window_arithmetic() {
        let scene = scene_with_mean("a", 10.0, 10, 10);
        assert_eq!(extract_patches(&scene).unwrap().len(), 9);
        let scene = scene_with_mean("b", 10.0, 8, 8);
        assert_eq!(extract_patches(&scene).unwrap().len(), 1);
    }

    #[test]
    fn extraction_skips_fully_invalid_label_windows() {
        let invalid: Vec<(usize, usize)> = (0..8)
            .flat_map(|r| (0..8).map(move |c| (r, c)))
            .collect();
        let scene = masked_scene("c", 8, 8, &invalid);
        assert!(extract_patches(&scene).unwrap().is_empty());
    }

    #[test]
    fn extraction_rejects_small_scenes() {
        let spec = FieldSpec {
            parcel_id: "tiny".into(),
            phase: 2,
            height: 7,
            width: 9,
            correlation_length: 2.0,
            band_ranges: default_band_ranges(),
            label_noise_sd: 0.0,
            boundary_irregularity: 0.0,
            seed: 3,
        };
        let small = generate_scene(&spec, &ChannelSchema::default_18()).unwrap();
        assert!(matches!(
            extract_patches(&small),
            Err(PreprocessError::SceneTooSmall { .. })
        ));
    }

    #[test]
    fn patch_content_matches_source_windows() {
        let scene = scene_with_mean("e", 10.0, 12, 12);
        let patches = extract_patches(&scene).unwrap();
        let patch = &patches[7]; // origin row 1, col 2 on a 12-wide scene (5 per row)
        assert_eq!(patch.origin.row, 1);
        assert_eq!(patch.origin.col, 2);
        let nir = scene.stack.channel_by_name("nir").unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(patch.input_at(0, r, c), nir.get(1 + r, 2 + c));
            }
        }
    }

    fn synthetic_pool(parcels: usize, per_parcel: usize, seed: u64) -> Vec<LabeledPatch> {
        // Hand-built patches with controlled mean labels; parcels round-robin.
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut pool = Vec::new();
        for p in 0..parcels {
            for k in 0..per_parcel {
                let value = (rng.next_u32() % 1000) as f32 / 10.0;
                pool.push(LabeledPatch {
                    channels: 1,
                    input: vec![0.0; 64],
                    label: vec![value; 64],
                    label_mask: vec![true; 64],
                    origin: PatchOrigin {
                        parcel_id: format!("parcel-{p}"),
                        phase: 2,
                        row: k as u32,
                        col: 0,
                    },
                });
            }
        }
        pool
    }

    #[test]
    fn split_isolates_two_of_ten_equal_parcels() {
        let pool = synthetic_pool(10, 30, 5);
        let split = stratified_split(&pool, [0.6, 0.2, 0.2], 42, 10).unwrap();
        assert_eq!(split.test_parcels.len(), 2);
        assert_eq!(split.test.len(), 60);
        assert_eq!(split.train.len() + split.validation.len(), 240);
        // Train:validation is 75:25 of the remainder up to per-bin rounding.
        let frac = split.train.len() as f64 / 240.0;
        assert!((frac - 0.75).abs() < 0.05, "train fraction {frac}");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let pool = synthetic_pool(8, 25, 9);
        let a = stratified_split(&pool, [0.6, 0.2, 0.2], 7, 10).unwrap();
        let b = stratified_split(&pool, [0.6, 0.2, 0.2], 7, 10).unwrap();
        assert_eq!(a, b);

        let mut seen = std::collections::HashSet::new();
        for idx in a.train.iter().chain(&a.validation).chain(&a.test) {
            assert!(seen.insert(*idx), "index {idx} appears twice");
        }
        assert_eq!(seen.len(), pool.len());
        // No test parcel leaks into train or validation.
        for idx in a.train.iter().chain(&a.validation) {
            assert!(!a.test_parcels.contains(&pool[*idx].origin.parcel_id));
        }
    }

    #[test]
    fn split_manifest_round_trip() {
        let pool = synthetic_pool(6, 10, 2);
        let split = stratified_split(&pool, [0.6, 0.2, 0.2], 3, 5).unwrap();
        let manifest = split.to_manifest(&pool);
        let back = DatasetSplit::from_manifest(&manifest, &pool).unwrap();
        assert_eq!(split, back);
    }

    #[test]
    fn standardizer_matches_population_oracle() {
        // Channel values {2, 4, 6}: mean 4, population sd sqrt(8/3).
        let mk = |v: f32| LabeledPatch {
            channels: 1,
            input: vec![v; 64],
            label: vec![v; 64],
            label_mask: vec![true; 64],
            origin: PatchOrigin {
                parcel_id: "p".into(),
                phase: 2,
                row: v as u32,
                col: 0,
            },
        };
        let patches = [mk(2.0), mk(4.0), mk(6.0)];
        let refs: Vec<&LabeledPatch> = patches.iter().collect();
        let s = fit_standardizer(&refs, ScaleMode::Stddev, "test", &["c0".into()]).unwrap();
        assert!((s.channel_mean[0] - 4.0).abs() < 1e-9);
        assert!((s.channel_scale[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-9);
        let out = s.apply(&patches[0]).unwrap();
        assert!((out.input[0] + 1.2247).abs() < 1e-4);
        let out = s.apply(&patches[1]).unwrap();
        assert!(out.input[0].abs() < 1e-6);
        let out = s.apply(&patches[2]).unwrap();
        assert!((out.input[0] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn standardizer_identity_when_already_standard() {
        // Two-pixel channel {-1, 1}: mean 0, sd 1.
        let patch = LabeledPatch {
            channels: 1,
            input: (0..64).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect(),
            label: vec![0.5; 64],
            label_mask: vec![true; 64],
            origin: PatchOrigin {
                parcel_id: "p".into(),
                phase: 2,
                row: 0,
                col: 0,
            },
        };
        let refs = [&patch];
        let s = fit_standardizer(&refs, ScaleMode::Stddev, "test", &[]).unwrap();
        let out = s.apply(&patch).unwrap();
        for (a, b) in out.input.iter().zip(&patch.input) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_label_pixels_pass_through_unscaled() {
        let mut patch = LabeledPatch {
            channels: 1,
            input: vec![1.0; 64],
            label: vec![10.0; 64],
            label_mask: vec![true; 64],
            origin: PatchOrigin {
                parcel_id: "p".into(),
                phase: 2,
                row: 0,
                col: 0,
            },
        };
        patch.label[5] = -9999.0;
        patch.label_mask[5] = false;
        let other = LabeledPatch {
            label: vec![30.0; 64],
            ..patch.clone()
        };
        let refs = [&patch, &other];
        let s = fit_standardizer(&refs, ScaleMode::Stddev, "test", &[]).unwrap();
        let out = s.apply(&patch).unwrap();
        assert_eq!(out.label[5], -9999.0);
        assert!(out.label[6] != 10.0, "valid labels must be transformed");
    }

    #[test]
    fn standardizer_variance_mode_divides_by_variance() {
        let mk = |v: f32| LabeledPatch {
            channels: 1,
            input: vec![v; 64],
            label: vec![v; 64],
            label_mask: vec![true; 64],
            origin: PatchOrigin {
                parcel_id: "p".into(),
                phase: 2,
                row: v as u32,
                col: 0,
            },
        };
        let patches = [mk(2.0), mk(4.0), mk(6.0)];
        let refs: Vec<&LabeledPatch> = patches.iter().collect();
        let s = fit_standardizer(&refs, ScaleMode::Variance, "test", &[]).unwrap();
        assert!((s.channel_scale[0] - 8.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn constant_channel_is_clamped_with_warning_flag() {
        let patch = LabeledPatch {
            channels: 1,
            input: vec![3.0; 64],
            label: vec![1.0; 64],
            label_mask: vec![true; 64],
            origin: PatchOrigin {
                parcel_id: "p".into(),
                phase: 2,
                row: 0,
                col: 0,
            },
        };
        let refs = [&patch];
        let s = fit_standardizer(&refs, ScaleMode::Stddev, "test", &["band".into()]).unwrap();
        assert_eq!(s.channel_scale[0], STANDARDIZER_EPSILON);
        assert!(s.clamped_channels.contains(&"band".to_string()));
    }

    #[test]
    fn refit_ignores_validation_patches() {
        let pool = synthetic_pool(4, 20, 31);
        let split = stratified_split(&pool, [0.6, 0.2, 0.2], 8, 4).unwrap();
        let train_refs: Vec<&LabeledPatch> = split.train.iter().map(|i| &pool[*i]).collect();
        let s1 = fit_standardizer(&train_refs, ScaleMode::Stddev, "train", &[]).unwrap();
        // Replace validation patches with garbage; the fit must not change.
        let mut pool2 = pool.clone();
        for idx in &split.validation {
            for v in pool2[*idx].input.iter_mut() {
                *v = 1e6;
            }
        }
        let train_refs2: Vec<&LabeledPatch> = split.train.iter().map(|i| &pool2[*i]).collect();
        let s2 = fit_standardizer(&train_refs2, ScaleMode::Stddev, "train", &[]).unwrap();
        assert_eq!(s1.channel_mean, s2.channel_mean);
        assert_eq!(s1.channel_scale, s2.channel_scale);
    }

    fn numbered_patch() -> LabeledPatch {
        LabeledPatch {
            channels: 2,
            input: (0..128).map(|i| i as f32).collect(),
            label: (0..64).map(|i| i as f32).collect(),
            label_mask: (0..64).map(|i| i % 3 != 0).collect(),
            origin: PatchOrigin {
                parcel_id: "p".into(),
                phase: 2,
                row: 0,
                col: 0,
            },
        }
    }

    #[test]
    fn flips_are_involutions() {
        let patch = numbered_patch();
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let once = apply_flips(&patch, h, v);
            let twice = apply_flips(&once, h, v);
            assert_eq!(twice, patch);
        }
    }

    #[test]
    fn flip_mirrors_coordinates() {
        let patch = numbered_patch();
        let flipped = apply_flips(&patch, true, false);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(flipped.label_at(r, c), patch.label_at(r, 7 - c));
            }
        }
        let flipped = apply_flips(&patch, false, true);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(flipped.label_at(r, c), patch.label_at(7 - r, c));
            }
        }
    }

    #[test]
    fn flip_frequency_is_near_half() {
        // Monte Carlo over 10,000 seeded draws. The probe patch is a
        // horizontal gradient constant along rows, so a vertical flip leaves
        // it unchanged and any difference detects exactly the horizontal flip.
        let probe = LabeledPatch {
            channels: 1,
            input: (0..64).map(|i| (i % 8) as f32).collect(),
            label: (0..64).map(|i| (i % 8) as f32).collect(),
            label_mask: vec![true; 64],
            origin: PatchOrigin {
                parcel_id: "p".into(),
                phase: 2,
                row: 0,
                col: 0,
            },
        };
        let mut h_flips = 0usize;
        for seed in 0..10_000u64 {
            if augment_flips(&probe, seed).input != probe.input {
                h_flips += 1;
            }
        }
        let freq = h_flips as f64 / 10_000.0;
        assert!(
            (0.47..=0.53).contains(&freq),
            "horizontal flip frequency {freq}"
        );
    }

    #[test]
    fn augmentation_preserves_channel_multisets() {
        let patch = numbered_patch();
        let out = augment_flips(&patch, 12345);
        for ch in 0..2 {
            let mut a: Vec<f32> = (0..64).map(|i| patch.input[ch * 64 + i]).collect();
            let mut b: Vec<f32> = (0..64).map(|i| out.input[ch * 64 + i]).collect();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn quantile_oracle_examples() {
        let data = [1.0, 2.0, 3.0, 4.0];
        assert!((quantile_sorted(&data, 0.5) - 2.5).abs() < 1e-12);
        assert!((quantile_sorted(&data, 0.25) - 1.75).abs() < 1e-12);
        assert_eq!(quantile_sorted(&data, 0.0), 1.0);
        assert_eq!(quantile_sorted(&data, 1.0), 4.0);
    }
}
