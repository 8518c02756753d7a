//! Data model for multispectral parcel imagery and prescription maps.
//!
//! A parcel observation is a stack of equally sized channel grids (spectral
//! bands, derived vegetation indices, broadcast weather planes) plus a shared
//! validity mask. Pixels carrying the no-data sentinel in a source band are
//! remapped to zero on ingestion and excluded from losses and metrics
//! downstream; the mask is the only record of which pixels are real.
//!
//! The on-disk format is a `.band` file of band-sequential 32-bit
//! little-endian floats with a JSON sidecar header. Invalid pixels are
//! written back as the sentinel, so a write/read round trip preserves both
//! values and masks.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Default no-data sentinel used by source rasters.
pub const DEFAULT_NODATA: f32 = -9999.0;

/// Spatial patch edge used throughout the pipeline (pixels).
pub const PATCH_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("grid dimensions {height}x{width} do not match {len} values")]
    BadShape {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("grid dimensions must be positive, got {height}x{width}")]
    EmptyGrid { height: usize, width: usize },
    #[error("NaN value at pixel ({row}, {col}) during ingestion")]
    NanPixel { row: usize, col: usize },
    #[error("no-data sentinel must be finite, got {0}")]
    NonFiniteSentinel(f32),
    #[error("dimension mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    DimensionMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("unknown vegetation index '{0}'")]
    UnknownIndex(String),
    #[error("schema has no channel named '{0}'")]
    MissingChannel(String),
    #[error("duplicate channel name '{0}' in schema")]
    DuplicateChannel(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("weather series is missing variable '{0}'")]
    MissingWeatherVariable(String),
    #[error("weather channel name '{0}' does not follow '<variable>_h00|_h08|_h16'")]
    BadWeatherChannelName(String),
    #[error("fertilization phase must be 1, 2, or 3, got {0}")]
    InvalidPhase(u8),
    #[error("negative prescription value {value} at valid pixel ({row}, {col})")]
    NegativePrescription { row: usize, col: usize, value: f32 },
    #[error("band file payload is {got} bytes, header implies {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("band file header mismatch: {0}")]
    HeaderMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Grids and masks
// ---------------------------------------------------------------------------

/// One H×W channel slice of 32-bit values, row-major.
///
/// Construction only checks the shape. "No NaN" is an ingestion guarantee:
/// [`remap_nodata`] rejects NaN, and every operation in this crate preserves
/// finiteness of finite inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BandGrid {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl BandGrid {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::EmptyGrid { height, width });
        }
        if values.len() != height * width {
            return Err(RasterError::BadShape {
                height,
                width,
                len: values.len(),
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.values[row * self.width + col] = value;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn same_dims(&self, other: &BandGrid) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Boolean validity companion to a [`BandGrid`]. A pixel is invalid iff the
/// source value equalled the no-data sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Result<Self, RasterError> {
        if valid.len() != height * width {
            return Err(RasterError::BadShape {
                height,
                width,
                len: valid.len(),
            });
        }
        Ok(Self {
            height,
            width,
            valid,
        })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            valid: vec![true; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.valid[row * self.width + col] = value;
    }

    pub fn flags(&self) -> &[bool] {
        &self.valid
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Pixel-wise conjunction; masks must share dimensions.
    pub fn and_with(&self, other: &ValidityMask) -> Result<ValidityMask, RasterError> {
        if self.height != other.height || self.width != other.width {
            return Err(RasterError::DimensionMismatch {
                expected_h: self.height,
                expected_w: self.width,
                got_h: other.height,
                got_w: other.width,
            });
        }
        let valid = self
            .valid
            .iter()
            .zip(&other.valid)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(ValidityMask {
            height: self.height,
            width: self.width,
            valid,
        })
    }
}

// ---------------------------------------------------------------------------
// Channel schema
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Spectral,
    Index,
    Weather,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub name: String,
    pub kind: ChannelKind,
}

/// Ordered, uniquely named channel list describing a stack's layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchema {
    entries: Vec<ChannelEntry>,
}

/// Suffixes naming the three eight-hour forecast intervals of the
/// fertilization day.
pub const WEATHER_INTERVAL_SUFFIXES: [&str; 3] = ["_h00", "_h08", "_h16"];

impl ChannelSchema {
    pub fn new(entries: Vec<ChannelEntry>) -> Result<Self, RasterError> {
        if entries.is_empty() {
            return Err(RasterError::SchemaMismatch("schema has no channels".into()));
        }
        for (i, entry) in entries.iter().enumerate() {
            if entries[..i].iter().any(|e| e.name == entry.name) {
                return Err(RasterError::DuplicateChannel(entry.name.clone()));
            }
        }
        Ok(Self { entries })
    }

    /// The default 18-channel layout: 4 spectral bands, 2 vegetation
    /// indices, and 4 weather variables at 3 eight-hour intervals.
    pub fn default_18() -> Self {
        let mut entries = Vec::with_capacity(18);
        for name in ["nir", "red", "green", "blue"] {
            entries.push(ChannelEntry {
                name: name.into(),
                kind: ChannelKind::Spectral,
            });
        }
        for name in ["bndvi", "ndvi"] {
            entries.push(ChannelEntry {
                name: name.into(),
                kind: ChannelKind::Index,
            });
        }
        for variable in ["temperature", "precipitation", "humidity", "wind_speed"] {
            for suffix in WEATHER_INTERVAL_SUFFIXES {
                entries.push(ChannelEntry {
                    name: format!("{variable}{suffix}"),
                    kind: ChannelKind::Weather,
                });
            }
        }
        Self::new(entries).expect("default schema is well-formed")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ChannelEntry] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn names_of_kind(&self, kind: ChannelKind) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.name.as_str())
            .collect()
    }

    /// Canonical JSON checksum of the channel layout, embedded in model
    /// checkpoints so a model cannot silently be applied to a different
    /// channel order.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(&self.entries).expect("schema serializes");
        crate::seeding::sha256_hex(json.as_bytes())
    }
}

/// Split a weather channel name into its variable and interval index.
pub fn parse_weather_channel(name: &str) -> Result<(&str, usize), RasterError> {
    for (interval, suffix) in WEATHER_INTERVAL_SUFFIXES.iter().enumerate() {
        if let Some(variable) = name.strip_suffix(suffix) {
            if !variable.is_empty() {
                return Ok((variable, interval));
            }
        }
    }
    Err(RasterError::BadWeatherChannelName(name.to_string()))
}

// ---------------------------------------------------------------------------
// Stacks and prescription maps
// ---------------------------------------------------------------------------

/// Per-variable weather forecasts at the three eight-hour intervals of the
/// fertilization day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    pub variables: Vec<WeatherVariable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherVariable {
    pub name: String,
    pub values: [f32; 3],
}

impl WeatherSeries {
    pub fn lookup(&self, variable: &str) -> Option<&[f32; 3]> {
        self.variables
            .iter()
            .find(|v| v.name == variable)
            .map(|v| &v.values)
    }
}

/// A parcel's multichannel observation at one fertilization phase, with a
/// shared validity mask. Channel order matches the schema exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterStack {
    pub schema: ChannelSchema,
    channels: Vec<BandGrid>,
    pub mask: ValidityMask,
    pub parcel_id: String,
    pub phase: u8,
}

impl RasterStack {
    pub fn new(
        schema: ChannelSchema,
        channels: Vec<BandGrid>,
        mask: ValidityMask,
        parcel_id: String,
        phase: u8,
    ) -> Result<Self, RasterError> {
        validate_phase(phase)?;
        if channels.len() != schema.len() {
            return Err(RasterError::SchemaMismatch(format!(
                "schema lists {} channels but {} grids were provided",
                schema.len(),
                channels.len()
            )));
        }
        let (h, w) = (channels[0].height(), channels[0].width());
        for grid in &channels {
            if grid.height() != h || grid.width() != w {
                return Err(RasterError::DimensionMismatch {
                    expected_h: h,
                    expected_w: w,
                    got_h: grid.height(),
                    got_w: grid.width(),
                });
            }
        }
        if mask.height() != h || mask.width() != w {
            return Err(RasterError::DimensionMismatch {
                expected_h: h,
                expected_w: w,
                got_h: mask.height(),
                got_w: mask.width(),
            });
        }
        Ok(Self {
            schema,
            channels,
            mask,
            parcel_id,
            phase,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn channels(&self) -> &[BandGrid] {
        &self.channels
    }

    pub fn channel(&self, index: usize) -> &BandGrid {
        &self.channels[index]
    }

    pub fn channel_by_name(&self, name: &str) -> Result<&BandGrid, RasterError> {
        let idx = self
            .schema
            .index_of(name)
            .ok_or_else(|| RasterError::MissingChannel(name.to_string()))?;
        Ok(&self.channels[idx])
    }
}

/// Per-pixel nitrogen application rates (kg·N·ha⁻¹) for one parcel and
/// phase. Valid entries are never negative.
#[derive(Clone, Debug, PartialEq)]
pub struct PrescriptionMap {
    pub grid: BandGrid,
    pub mask: ValidityMask,
    pub parcel_id: String,
    pub phase: u8,
}

impl PrescriptionMap {
    pub fn new(
        grid: BandGrid,
        mask: ValidityMask,
        parcel_id: String,
        phase: u8,
    ) -> Result<Self, RasterError> {
        validate_phase(phase)?;
        if grid.height() != mask.height() || grid.width() != mask.width() {
            return Err(RasterError::DimensionMismatch {
                expected_h: grid.height(),
                expected_w: grid.width(),
                got_h: mask.height(),
                got_w: mask.width(),
            });
        }
        for row in 0..grid.height() {
            for col in 0..grid.width() {
                let value = grid.get(row, col);
                if mask.get(row, col) && value < 0.0 {
                    return Err(RasterError::NegativePrescription { row, col, value });
                }
            }
        }
        Ok(Self {
            grid,
            mask,
            parcel_id,
            phase,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.grid.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.grid.width()
    }
}

fn validate_phase(phase: u8) -> Result<(), RasterError> {
    if (1..=3).contains(&phase) {
        Ok(())
    } else {
        Err(RasterError::InvalidPhase(phase))
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Replace every sentinel entry with zero and record those pixels as
/// invalid. All other entries pass through bit for bit; NaN anywhere is an
/// ingestion error naming the offending pixel. Idempotent, since zero is not
/// a sentinel once remapped.
pub fn remap_nodata(
    grid: &BandGrid,
    sentinel: f32,
) -> Result<(BandGrid, ValidityMask), RasterError> {
    if !sentinel.is_finite() {
        return Err(RasterError::NonFiniteSentinel(sentinel));
    }
    let (h, w) = (grid.height(), grid.width());
    let mut values = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for (i, &v) in grid.values().iter().enumerate() {
        if v.is_nan() {
            return Err(RasterError::NanPixel {
                row: i / w,
                col: i % w,
            });
        }
        if v == sentinel {
            values.push(0.0);
            valid.push(false);
        } else {
            values.push(v);
            valid.push(true);
        }
    }
    Ok((
        BandGrid::new(h, w, values)?,
        ValidityMask::new(h, w, valid)?,
    ))
}

/// Names of the vegetation indices this module can compute.
pub const REGISTERED_INDICES: [&str; 2] = ["bndvi", "ndvi"];

/// Compute a registered vegetation index over a stack.
///
/// `bndvi` = (nir − blue)/(nir + blue), `ndvi` = (nir − red)/(nir + red).
/// Zero denominators and masked pixels both yield 0, so the output is finite
/// for any finite input.
pub fn compute_vegetation_index(
    stack: &RasterStack,
    index_name: &str,
) -> Result<BandGrid, RasterError> {
    let (plus, minus) = match index_name {
        "bndvi" => ("nir", "blue"),
        "ndvi" => ("nir", "red"),
        other => return Err(RasterError::UnknownIndex(other.to_string())),
    };
    let a = stack.channel_by_name(plus)?;
    let b = stack.channel_by_name(minus)?;
    let (h, w) = (stack.height(), stack.width());
    let mut values = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            if !stack.mask.get(row, col) {
                values.push(0.0);
                continue;
            }
            values.push(normalized_difference(a.get(row, col), b.get(row, col)));
        }
    }
    BandGrid::new(h, w, values)
}

/// (a − b)/(a + b) with the zero-denominator case defined as 0.
#[inline]
pub fn normalized_difference(a: f32, b: f32) -> f32 {
    let denom = a + b;
    if denom == 0.0 {
        0.0
    } else {
        (a - b) / denom
    }
}

/// Assemble a full input stack in schema order from ingested spectral bands,
/// computed vegetation indices, and per-variable weather forecasts broadcast
/// as constant planes.
///
/// Spectral values are copied bit for bit; the stack mask is the conjunction
/// of the per-band masks. `index_names` must match the schema's index
/// channels in order.
pub fn assemble_input_stack(
    spectral: &[(BandGrid, ValidityMask)],
    index_names: &[&str],
    weather: &WeatherSeries,
    schema: &ChannelSchema,
    parcel_id: &str,
    phase: u8,
) -> Result<RasterStack, RasterError> {
    let spectral_names = schema.names_of_kind(ChannelKind::Spectral);
    if spectral.len() != spectral_names.len() {
        return Err(RasterError::SchemaMismatch(format!(
            "schema lists {} spectral channels but {} bands were provided",
            spectral_names.len(),
            spectral.len()
        )));
    }
    let schema_indices = schema.names_of_kind(ChannelKind::Index);
    if index_names != schema_indices.as_slice() {
        return Err(RasterError::SchemaMismatch(format!(
            "index list {index_names:?} does not match schema index channels {schema_indices:?}"
        )));
    }
    let (h, w) = (spectral[0].0.height(), spectral[0].0.width());
    let mut mask = ValidityMask::all_valid(h, w);
    for (grid, band_mask) in spectral {
        if grid.height() != h || grid.width() != w {
            return Err(RasterError::DimensionMismatch {
                expected_h: h,
                expected_w: w,
                got_h: grid.height(),
                got_w: grid.width(),
            });
        }
        mask = mask.and_with(band_mask)?;
    }

    // Indices are computed against a spectral-only view of the stack so
    // their source channels resolve by name.
    let spectral_schema = ChannelSchema::new(
        spectral_names
            .iter()
            .map(|name| ChannelEntry {
                name: (*name).to_string(),
                kind: ChannelKind::Spectral,
            })
            .collect(),
    )?;
    let spectral_stack = RasterStack::new(
        spectral_schema,
        spectral.iter().map(|(g, _)| g.clone()).collect(),
        mask.clone(),
        parcel_id.to_string(),
        phase,
    )?;

    let mut channels = Vec::with_capacity(schema.len());
    let mut spectral_iter = spectral.iter();
    for entry in schema.entries() {
        match entry.kind {
            ChannelKind::Spectral => {
                let (grid, _) = spectral_iter.next().expect("count checked above");
                channels.push(grid.clone());
            }
            ChannelKind::Index => {
                channels.push(compute_vegetation_index(&spectral_stack, &entry.name)?);
            }
            ChannelKind::Weather => {
                let (variable, interval) = parse_weather_channel(&entry.name)?;
                let values = weather
                    .lookup(variable)
                    .ok_or_else(|| RasterError::MissingWeatherVariable(variable.to_string()))?;
                channels.push(BandGrid::filled(h, w, values[interval]));
            }
        }
    }

    RasterStack::new(schema.clone(), channels, mask, parcel_id.to_string(), phase)
}

// ---------------------------------------------------------------------------
// Band file format
// ---------------------------------------------------------------------------

/// JSON sidecar for a `.band` payload.
///
/// Values equal to `nodata` are reserved for invalid pixels; the reader
/// reconstructs the validity mask from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandFileHeader {
    pub schema_version: u32,
    /// "stack" or "prescription".
    pub content: String,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<ChannelEntry>,
    pub nodata: f32,
    pub parcel_id: String,
    pub phase: u8,
}

pub const BAND_FORMAT_VERSION: u32 = 1;
pub const PRESCRIPTION_CHANNEL_NAME: &str = "nitrogen_kg_ha";

fn write_band_payload(
    path: &Path,
    planes: &[&BandGrid],
    mask: &ValidityMask,
    nodata: f32,
) -> Result<(), RasterError> {
    let mut bytes = Vec::with_capacity(planes.len() * mask.flags().len() * 4);
    for grid in planes {
        for (value, valid) in grid.values().iter().zip(mask.flags()) {
            let v = if *valid { *value } else { nodata };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_band_payload(
    path: &Path,
    header: &BandFileHeader,
) -> Result<(Vec<BandGrid>, ValidityMask), RasterError> {
    let bytes = std::fs::read(path)?;
    let per_plane = header.height * header.width;
    let expected = header.channels.len() * per_plane * 4;
    if bytes.len() != expected {
        return Err(RasterError::PayloadSize {
            expected,
            got: bytes.len(),
        });
    }
    let mut grids = Vec::with_capacity(header.channels.len());
    let mut mask = ValidityMask::all_valid(header.height, header.width);
    for plane in 0..header.channels.len() {
        let start = plane * per_plane * 4;
        let values: Vec<f32> = bytes[start..start + per_plane * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let raw = BandGrid::new(header.height, header.width, values)?;
        let (grid, band_mask) = remap_nodata(&raw, header.nodata)?;
        mask = mask.and_with(&band_mask)?;
        grids.push(grid);
    }
    Ok((grids, mask))
}

/// Write a stack as `<band_path>` + `<header_path>`.
pub fn write_stack(
    stack: &RasterStack,
    band_path: &Path,
    header_path: &Path,
    nodata: f32,
) -> Result<(), RasterError> {
    let header = BandFileHeader {
        schema_version: BAND_FORMAT_VERSION,
        content: "stack".into(),
        height: stack.height(),
        width: stack.width(),
        channels: stack.schema.entries().to_vec(),
        nodata,
        parcel_id: stack.parcel_id.clone(),
        phase: stack.phase,
    };
    std::fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
    let planes: Vec<&BandGrid> = stack.channels().iter().collect();
    write_band_payload(band_path, &planes, &stack.mask, nodata)
}

pub fn read_stack(band_path: &Path, header_path: &Path) -> Result<RasterStack, RasterError> {
    let header: BandFileHeader = serde_json::from_str(&std::fs::read_to_string(header_path)?)?;
    if header.content != "stack" {
        return Err(RasterError::HeaderMismatch(format!(
            "expected content 'stack', got '{}'",
            header.content
        )));
    }
    let (grids, mask) = read_band_payload(band_path, &header)?;
    let schema = ChannelSchema::new(header.channels.clone())?;
    RasterStack::new(schema, grids, mask, header.parcel_id, header.phase)
}

pub fn write_prescription(
    map: &PrescriptionMap,
    band_path: &Path,
    header_path: &Path,
    nodata: f32,
) -> Result<(), RasterError> {
    let header = BandFileHeader {
        schema_version: BAND_FORMAT_VERSION,
        content: "prescription".into(),
        height: map.height(),
        width: map.width(),
        channels: vec![ChannelEntry {
            name: PRESCRIPTION_CHANNEL_NAME.into(),
            kind: ChannelKind::Spectral,
        }],
        nodata,
        parcel_id: map.parcel_id.clone(),
        phase: map.phase,
    };
    std::fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
    write_band_payload(band_path, &[&map.grid], &map.mask, nodata)
}

pub fn read_prescription(
    band_path: &Path,
    header_path: &Path,
) -> Result<PrescriptionMap, RasterError> {
    let header: BandFileHeader = serde_json::from_str(&std::fs::read_to_string(header_path)?)?;
    if header.content != "prescription" {
        return Err(RasterError::HeaderMismatch(format!(
            "expected content 'prescription', got '{}'",
            header.content
        )));
    }
    if header.channels.len() != 1 {
        return Err(RasterError::HeaderMismatch(format!(
            "prescription file must have one channel, got {}",
            header.channels.len()
        )));
    }
    let (mut grids, mask) = read_band_payload(band_path, &header)?;
    PrescriptionMap::new(grids.remove(0), mask, header.parcel_id, header.phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: &[&[f32]]) -> BandGrid {
        let h = rows.len();
        let w = rows[0].len();
        BandGrid::new(h, w, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn remap_replaces_sentinel_with_zero_and_flags_mask() {
        let (out, mask) = remap_nodata(&grid(&[&[-9999.0, 5.0]]), -9999.0).unwrap();
        assert_eq!(out.values(), &[0.0, 5.0]);
        assert_eq!(mask.flags(), &[false, true]);
    }

    #[test]
    fn remap_is_identity_without_sentinel() {
        let g = grid(&[&[1.5, 2.5], &[3.5, 4.5]]);
        let (out, mask) = remap_nodata(&g, -9999.0).unwrap();
        assert_eq!(out, g);
        assert!(mask.flags().iter().all(|v| *v));
    }

    #[test]
    fn remap_all_sentinel_grid() {
        let (out, mask) = remap_nodata(&grid(&[&[-9999.0, -9999.0]]), -9999.0).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0]);
        assert_eq!(mask.count_valid(), 0);
    }

    #[test]
    fn remap_rejects_nan_with_coordinates() {
        let g = grid(&[&[1.0, 2.0], &[f32::NAN, 4.0]]);
        match remap_nodata(&g, -9999.0) {
            Err(RasterError::NanPixel { row: 1, col: 0 }) => {}
            other => panic!("expected NanPixel at (1,0), got {other:?}"),
        }
    }

    #[test]
    fn remap_rejects_non_finite_sentinel() {
        let g = grid(&[&[1.0]]);
        assert!(matches!(
            remap_nodata(&g, f32::INFINITY),
            Err(RasterError::NonFiniteSentinel(_))
        ));
    }

    fn two_band_stack(nir: BandGrid, other: BandGrid, other_name: &str) -> RasterStack {
        let schema = ChannelSchema::new(vec![
            ChannelEntry {
                name: "nir".into(),
                kind: ChannelKind::Spectral,
            },
            ChannelEntry {
                name: other_name.into(),
                kind: ChannelKind::Spectral,
            },
        ])
        .unwrap();
        let mask = ValidityMask::all_valid(nir.height(), nir.width());
        RasterStack::new(schema, vec![nir, other], mask, "p".into(), 2).unwrap()
    }

    #[test]
    fn bndvi_direct_formula() {
        let stack = two_band_stack(grid(&[&[0.6]]), grid(&[&[0.2]]), "blue");
        let idx = compute_vegetation_index(&stack, "bndvi").unwrap();
        assert!((idx.get(0, 0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn bndvi_symmetric_numerator_is_zero() {
        let stack = two_band_stack(grid(&[&[0.3]]), grid(&[&[0.3]]), "blue");
        let idx = compute_vegetation_index(&stack, "bndvi").unwrap();
        assert_eq!(idx.get(0, 0), 0.0);
    }

    #[test]
    fn bndvi_zero_denominator_guard() {
        let stack = two_band_stack(grid(&[&[0.0]]), grid(&[&[0.0]]), "blue");
        let idx = compute_vegetation_index(&stack, "bndvi").unwrap();
        assert_eq!(idx.get(0, 0), 0.0);
    }

    #[test]
    fn vegetation_index_masked_pixel_is_zero() {
        let schema = ChannelSchema::new(vec![
            ChannelEntry {
                name: "nir".into(),
                kind: ChannelKind::Spectral,
            },
            ChannelEntry {
                name: "red".into(),
                kind: ChannelKind::Spectral,
            },
        ])
        .unwrap();
        let mut mask = ValidityMask::all_valid(1, 2);
        mask.set(0, 0, false);
        let stack = RasterStack::new(
            schema,
            vec![grid(&[&[0.9, 0.9]]), grid(&[&[0.1, 0.1]])],
            mask,
            "p".into(),
            2,
        )
        .unwrap();
        let idx = compute_vegetation_index(&stack, "ndvi").unwrap();
        assert_eq!(idx.get(0, 0), 0.0);
        assert!((idx.get(0, 1) - 0.8).abs() < 1e-6);
    }

    #[test]
    fn unknown_index_and_missing_channel_error() {
        let stack = two_band_stack(grid(&[&[0.5]]), grid(&[&[0.2]]), "blue");
        assert!(matches!(
            compute_vegetation_index(&stack, "savi"),
            Err(RasterError::UnknownIndex(_))
        ));
        // ndvi needs "red", which this stack lacks.
        assert!(matches!(
            compute_vegetation_index(&stack, "ndvi"),
            Err(RasterError::MissingChannel(_))
        ));
    }

    fn default_weather() -> WeatherSeries {
        WeatherSeries {
            variables: ["temperature", "precipitation", "humidity", "wind_speed"]
                .iter()
                .enumerate()
                .map(|(i, name)| WeatherVariable {
                    name: (*name).to_string(),
                    values: [i as f32, 7.0, i as f32 + 0.5],
                })
                .collect(),
        }
    }

    fn spectral_bands(h: usize, w: usize) -> Vec<(BandGrid, ValidityMask)> {
        (0..4)
            .map(|i| {
                let g = BandGrid::filled(h, w, 100.0 * (i + 1) as f32);
                let m = ValidityMask::all_valid(h, w);
                (g, m)
            })
            .collect()
    }

    #[test]
    fn assemble_default_schema_is_18_channels_in_order() {
        let schema = ChannelSchema::default_18();
        let stack = assemble_input_stack(
            &spectral_bands(3, 4),
            &["bndvi", "ndvi"],
            &default_weather(),
            &schema,
            "parcel-1",
            2,
        )
        .unwrap();
        assert_eq!(stack.channels().len(), 18);
        assert_eq!(stack.schema, schema);
        // Weather channel for precipitation at interval 1 is a uniform 7.0 plane.
        let plane = stack.channel_by_name("precipitation_h08").unwrap();
        assert!(plane.values().iter().all(|v| *v == 7.0));
    }

    #[test]
    fn assemble_preserves_spectral_bits_and_mask_monotone() {
        let mut bands = spectral_bands(2, 2);
        bands[0].0.set(0, 1, 1234.5678);
        bands[2].1.set(1, 0, false);
        let stack = assemble_input_stack(
            &bands,
            &["bndvi", "ndvi"],
            &default_weather(),
            &ChannelSchema::default_18(),
            "parcel-1",
            1,
        )
        .unwrap();
        assert_eq!(stack.channel(0).get(0, 1).to_bits(), 1234.5678f32.to_bits());
        // Invalid in one source band -> invalid in the stack.
        assert!(!stack.mask.get(1, 0));
        assert!(stack.mask.get(0, 0));
    }

    #[test]
    fn assemble_rejects_dimension_mismatch() {
        let mut bands = spectral_bands(2, 2);
        bands[1] = (BandGrid::filled(3, 2, 1.0), ValidityMask::all_valid(3, 2));
        let err = assemble_input_stack(
            &bands,
            &["bndvi", "ndvi"],
            &default_weather(),
            &ChannelSchema::default_18(),
            "p",
            1,
        );
        assert!(matches!(err, Err(RasterError::DimensionMismatch { .. })));
    }

    #[test]
    fn assemble_rejects_missing_weather_variable() {
        let weather = WeatherSeries {
            variables: vec![WeatherVariable {
                name: "temperature".into(),
                values: [1.0, 2.0, 3.0],
            }],
        };
        let err = assemble_input_stack(
            &spectral_bands(2, 2),
            &["bndvi", "ndvi"],
            &weather,
            &ChannelSchema::default_18(),
            "p",
            1,
        );
        assert!(matches!(err, Err(RasterError::MissingWeatherVariable(_))));
    }

    #[test]
    fn schema_rejects_duplicate_names() {
        let err = ChannelSchema::new(vec![
            ChannelEntry {
                name: "nir".into(),
                kind: ChannelKind::Spectral,
            },
            ChannelEntry {
                name: "nir".into(),
                kind: ChannelKind::Spectral,
            },
        ]);
        assert!(matches!(err, Err(RasterError::DuplicateChannel(_))));
    }

    #[test]
    fn prescription_rejects_negative_valid_entries() {
        let g = grid(&[&[-1.0, 5.0]]);
        let mask = ValidityMask::all_valid(1, 2);
        assert!(matches!(
            PrescriptionMap::new(g, mask, "p".into(), 2),
            Err(RasterError::NegativePrescription { .. })
        ));
        // The same value behind an invalid pixel is allowed.
        let g = grid(&[&[-1.0, 5.0]]);
        let mut mask = ValidityMask::all_valid(1, 2);
        mask.set(0, 0, false);
        assert!(PrescriptionMap::new(g, mask, "p".into(), 2).is_ok());
    }

    #[test]
    fn band_file_round_trip_preserves_stack() {
        let dir = tempfile::tempdir().unwrap();
        let mut bands = spectral_bands(5, 6);
        bands[0].0.set(2, 3, 777.25);
        bands[3].1.set(0, 0, false);
        let stack = assemble_input_stack(
            &bands,
            &["bndvi", "ndvi"],
            &default_weather(),
            &ChannelSchema::default_18(),
            "roundtrip",
            3,
        )
        .unwrap();
        let band = dir.path().join("scene.band");
        let header = dir.path().join("scene.json");
        write_stack(&stack, &band, &header, DEFAULT_NODATA).unwrap();
        let loaded = read_stack(&band, &header).unwrap();
        assert_eq!(loaded.parcel_id, "roundtrip");
        assert_eq!(loaded.phase, 3);
        assert_eq!(loaded.mask, stack.mask);
        for (a, b) in loaded.channels().iter().zip(stack.channels()) {
            for ((x, y), valid) in a.values().iter().zip(b.values()).zip(stack.mask.flags()) {
                if *valid {
                    assert_eq!(x.to_bits(), y.to_bits(), "valid pixel changed: {x} vs {y}");
                } else {
                    // Invalid pixels are normalized to 0 by ingestion.
                    assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn prescription_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(&[&[0.0, 12.5], &[40.0, 160.0]]);
        let mut mask = ValidityMask::all_valid(2, 2);
        mask.set(0, 0, false);
        let map = PrescriptionMap::new(g, mask, "rx".into(), 2).unwrap();
        let band = dir.path().join("rx.band");
        let header = dir.path().join("rx.json");
        write_prescription(&map, &band, &header, DEFAULT_NODATA).unwrap();
        let loaded = read_prescription(&band, &header).unwrap();
        assert_eq!(loaded, map);
    }

    #[test]
    fn parse_weather_channel_names() {
        assert_eq!(
            parse_weather_channel("wind_speed_h16").unwrap(),
            ("wind_speed", 2)
        );
        assert!(parse_weather_channel("wind_speed").is_err());
        assert!(parse_weather_channel("_h00").is_err());
    }

    proptest! {
        #[test]
        fn remap_is_idempotent(values in proptest::collection::vec(-10000.0f32..10000.0, 12)) {
            let g = BandGrid::new(3, 4, values).unwrap();
            let (once, mask_once) = remap_nodata(&g, -9999.0).unwrap();
            let (twice, mask_twice) = remap_nodata(&once, -9999.0).unwrap();
            prop_assert_eq!(&once, &twice);
            // Remapped grids contain no sentinel, so the second mask is all true;
            // the first mask already captured the invalid pixels.
            prop_assert!(mask_twice.flags().iter().all(|v| *v));
            prop_assert_eq!(mask_once.flags().len(), 12);
        }

        #[test]
        fn vegetation_index_is_always_finite(
            a in proptest::collection::vec(0.0f32..4095.0, 9),
            b in proptest::collection::vec(0.0f32..4095.0, 9),
        ) {
            let stack = two_band_stack(
                BandGrid::new(3, 3, a).unwrap(),
                BandGrid::new(3, 3, b).unwrap(),
                "red",
            );
            let idx = compute_vegetation_index(&stack, "ndvi").unwrap();
            prop_assert!(idx.values().iter().all(|v| v.is_finite()));
        }
    }
}
