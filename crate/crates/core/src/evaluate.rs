//! Patch- and map-level accuracy metrics, overlap-averaged prescription-map
//! reconstruction, and grayscale rendering.
//!
//! Metrics are computed in original units (kg·N·ha⁻¹) by pooling valid
//! pixels: RMSE over all of them, MAPE excluding zero targets (the exclusion
//! count is reported), and SMAPE with the factor-2 numerator over
//! |pred|+|label| wherever that denominator is positive.

use crate::autodiff::Tensor4;
use crate::preprocess::PatchOrigin;
use crate::raster::{BandGrid, PrescriptionMap, ValidityMask, PATCH_SIZE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and label shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("mask has {got} entries for {expected} pixels")]
    MaskLength { expected: usize, got: usize },
    #[error("no valid pixels to score")]
    NoValidPixels,
    #[error("patch at ({row}, {col}) exceeds scene bounds {h}x{w}")]
    OriginOutOfBounds {
        row: u32,
        col: u32,
        h: usize,
        w: usize,
    },
    #[error("patch prediction has {0} values, expected {1}")]
    BadPatchLength(usize, usize),
    #[error("origin parcel '{got}' does not belong to scene '{expected}'")]
    OriginParcel { expected: String, got: String },
    #[error("maps have different dimensions: {0}x{1} vs {2}x{3}")]
    MapDimensions(usize, usize, usize, usize),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricScope {
    Patch,
    Map,
}

/// Pooled error metrics over one scope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scope: MetricScope,
    /// kg·N·ha⁻¹, in original units.
    pub rmse: f64,
    pub mape_percent: f64,
    pub smape_percent: f64,
    /// Number of patches or maps pooled into this report.
    pub n_items: usize,
    pub n_valid_pixels: usize,
    /// Valid pixels whose zero target excluded them from MAPE.
    pub excluded_zero_targets: usize,
}

/// Streaming accumulator shared by the patch and map entry points.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sse: f64,
    n: usize,
    ape_sum: f64,
    ape_n: usize,
    zero_targets: usize,
    sape_sum: f64,
    sape_n: usize,
    items: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add_pixel(&mut self, prediction: f64, label: f64) {
        let err = prediction - label;
        self.sse += err * err;
        self.n += 1;
        if label != 0.0 {
            self.ape_sum += (err / label).abs();
            self.ape_n += 1;
        } else {
            self.zero_targets += 1;
        }
        let denom = prediction.abs() + label.abs();
        if denom > 0.0 {
            self.sape_sum += 2.0 * err.abs() / denom;
            self.sape_n += 1;
        }
    }

    pub fn add_item(&mut self) {
        self.items += 1;
    }

    pub fn valid_pixels(&self) -> usize {
        self.n
    }

    pub fn finalize(&self, scope: MetricScope) -> Result<MetricReport, EvalError> {
        if self.n == 0 {
            return Err(EvalError::NoValidPixels);
        }
        Ok(MetricReport {
            scope,
            rmse: (self.sse / self.n as f64).sqrt(),
            mape_percent: if self.ape_n == 0 {
                0.0
            } else {
                100.0 * self.ape_sum / self.ape_n as f64
            },
            smape_percent: if self.sape_n == 0 {
                0.0
            } else {
                100.0 * self.sape_sum / self.sape_n as f64
            },
            n_items: self.items,
            n_valid_pixels: self.n,
            excluded_zero_targets: self.zero_targets,
        })
    }
}

/// Pooled metrics over a batch of patch predictions, all `[N, 1, 8, 8]` in
/// original units.
pub fn patch_metrics(
    predictions: &Tensor4,
    labels: &Tensor4,
    mask: &[bool],
) -> Result<MetricReport, EvalError> {
    if predictions.shape() != labels.shape() {
        return Err(EvalError::ShapeMismatch(predictions.shape(), labels.shape()));
    }
    if mask.len() != predictions.num_elements() {
        return Err(EvalError::MaskLength {
            expected: predictions.num_elements(),
            got: mask.len(),
        });
    }
    let mut acc = MetricAccumulator::new();
    for _ in 0..predictions.shape()[0] {
        acc.add_item();
    }
    for ((p, l), m) in predictions.data().iter().zip(labels.data()).zip(mask) {
        if *m {
            acc.add_pixel(*p as f64, *l as f64);
        }
    }
    acc.finalize(MetricScope::Patch)
}

/// Rebuild a full prescription map from overlapping 8×8 patch predictions.
///
/// Each pixel is the arithmetic mean of every patch value covering it;
/// averaged values are floored at zero so the result satisfies the
/// prescription-map nonnegativity invariant. Pixels no patch covers are
/// invalid. The coverage-count grid is returned alongside.
pub fn reconstruct_map(
    patch_predictions: &[(PatchOrigin, Vec<f32>)],
    height: usize,
    width: usize,
    parcel_id: &str,
    phase: u8,
) -> Result<(PrescriptionMap, Vec<u32>), EvalError> {
    let mut sums = vec![0.0f64; height * width];
    let mut coverage = vec![0u32; height * width];
    for (origin, values) in patch_predictions {
        if origin.parcel_id != parcel_id {
            return Err(EvalError::OriginParcel {
                expected: parcel_id.to_string(),
                got: origin.parcel_id.clone(),
            });
        }
        if values.len() != PATCH_SIZE * PATCH_SIZE {
            return Err(EvalError::BadPatchLength(
                values.len(),
                PATCH_SIZE * PATCH_SIZE,
            ));
        }
        let (row, col) = (origin.row as usize, origin.col as usize);
        if row + PATCH_SIZE > height || col + PATCH_SIZE > width {
            return Err(EvalError::OriginOutOfBounds {
                row: origin.row,
                col: origin.col,
                h: height,
                w: width,
            });
        }
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                let idx = (row + r) * width + (col + c);
                sums[idx] += values[r * PATCH_SIZE + c] as f64;
                coverage[idx] += 1;
            }
        }
    }
    let mut grid = vec![0.0f32; height * width];
    let mut valid = vec![false; height * width];
    for i in 0..height * width {
        if coverage[i] > 0 {
            grid[i] = (sums[i] / coverage[i] as f64).max(0.0) as f32;
            valid[i] = true;
        }
    }
    let map = PrescriptionMap::new(
        BandGrid::new(height, width, grid)?,
        ValidityMask::new(height, width, valid)?,
        parcel_id.to_string(),
        phase,
    )?;
    Ok((map, coverage))
}

/// Metrics between a reconstructed map and its ground truth over the jointly
/// valid pixels. Dimensions must agree; masks may differ (a reconstruction
/// legitimately covers pixels outside the truth's parcel boundary).
pub fn map_metrics(
    reconstructed: &PrescriptionMap,
    truth: &PrescriptionMap,
) -> Result<MetricReport, EvalError> {
    let mut acc = MetricAccumulator::new();
    acc.add_item();
    accumulate_map(&mut acc, reconstructed, truth)?;
    acc.finalize(MetricScope::Map)
}

/// Pool pixels across several (reconstruction, truth) pairs into one report.
pub fn pooled_map_metrics<'a>(
    pairs: impl IntoIterator<Item = (&'a PrescriptionMap, &'a PrescriptionMap)>,
) -> Result<MetricReport, EvalError> {
    let mut acc = MetricAccumulator::new();
    for (reconstructed, truth) in pairs {
        acc.add_item();
        accumulate_map(&mut acc, reconstructed, truth)?;
    }
    acc.finalize(MetricScope::Map)
}

fn accumulate_map(
    acc: &mut MetricAccumulator,
    reconstructed: &PrescriptionMap,
    truth: &PrescriptionMap,
) -> Result<(), EvalError> {
    if reconstructed.height() != truth.height() || reconstructed.width() != truth.width() {
        return Err(EvalError::MapDimensions(
            reconstructed.height(),
            reconstructed.width(),
            truth.height(),
            truth.width(),
        ));
    }
    for ((p, l), (mp, ml)) in reconstructed
        .grid
        .values()
        .iter()
        .zip(truth.grid.values())
        .zip(
            reconstructed
                .mask
                .flags()
                .iter()
                .zip(truth.mask.flags()),
        )
    {
        if *mp && *ml {
            acc.add_pixel(*p as f64, *l as f64);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV and PGM rendering
// ---------------------------------------------------------------------------

/// One row per scope×variant, for the metrics CSV artifact.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from(
        "variant,scope,rmse_kg_n_ha,mape_percent,smape_percent,n_items,n_valid_pixels,excluded_zero_targets\n",
    );
    for (variant, report) in rows {
        let scope = match report.scope {
            MetricScope::Patch => "patch",
            MetricScope::Map => "map",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            variant,
            scope,
            report.rmse,
            report.mape_percent,
            report.smape_percent,
            report.n_items,
            report.n_valid_pixels,
            report.excluded_zero_targets,
        ));
    }
    out
}

/// Shared linear scale over the jointly valid values of both maps.
pub fn shared_scale(a: &PrescriptionMap, b: &PrescriptionMap) -> (f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for map in [a, b] {
        for (v, m) in map.grid.values().iter().zip(map.mask.flags()) {
            if *m {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi <= lo {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

/// Render a map as a binary (P5) 8-bit PGM on a linear [lo, hi] scale.
/// Invalid pixels render black.
pub fn render_pgm(map: &PrescriptionMap, lo: f32, hi: f32) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    for (v, m) in map.grid.values().iter().zip(map.mask.flags()) {
        let byte = if *m {
            (255.0 * ((v - lo) / span).clamp(0.0, 1.0)).round() as u8
        } else {
            0
        };
        out.push(byte);
    }
    out
}

/// Actual/predicted PGM pair on one shared scale.
pub fn render_pair(actual: &PrescriptionMap, predicted: &PrescriptionMap) -> (Vec<u8>, Vec<u8>) {
    let (lo, hi) = shared_scale(actual, predicted);
    (render_pgm(actual, lo, hi), render_pgm(predicted, lo, hi))
}
