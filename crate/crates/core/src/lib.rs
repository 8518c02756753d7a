//! Nitrogen prescription-map learning pipeline over multispectral parcel
//! rasters.
//!
//! The crate follows the pipeline stages end to end:
//!
//! * [`raster`] — multichannel parcel imagery, validity masks, vegetation
//!   indices, and the `.band` file format;
//! * [`synth`] — seedable synthetic scenes (correlated random fields plus a
//!   documented nitrogen ground-truth function) standing in for field data;
//! * [`preprocess`] — outlier filtering, 8×8 stride-1 patch extraction,
//!   leakage-safe stratified splitting, z-score standardization, and flip
//!   augmentation;
//! * [`autodiff`] — dense NCHW tensors with reverse-mode differentiation for
//!   the operator set the regressor needs;
//! * [`unet`] — the encoder–decoder model in three width variants and the
//!   masked RMSE objective;
//! * [`train`] — Adam, early stopping, checkpointing, energy instrumentation;
//! * [`evaluate`] — patch metrics, overlap-averaged map reconstruction, map
//!   metrics, and PGM rendering;
//! * [`green`] — energy and CO₂-equivalent accounting;
//! * [`pipeline`] — file-artifact orchestration of all stages behind one
//!   configuration and one global seed.

pub mod autodiff;
pub mod evaluate;
pub mod green;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod seeding;
pub mod synth;
pub mod train;
pub mod unet;
