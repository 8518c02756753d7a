//! Dense NCHW tensor numerics with reverse-mode differentiation.
//!
//! The operator set is exactly what the encoder–decoder regressor needs:
//! cross-correlation (1×1 and 3×3, zero padding), leaky/plain ReLU, 2×2
//! max pooling, 2×2 stride-2 transposed convolution, channel concatenation,
//! a sum reduction for oracle tests, and a masked-RMSE head. Forward passes
//! record onto a [`Graph`] tape; [`Graph::backward`] replays it in exact
//! reverse order and accumulates gradients into the owning [`ParamSet`].
//!
//! Everything is single-threaded and runs in a fixed operation order, so
//! identical inputs and parameters produce bit-identical outputs and
//! gradients on a given platform. Activations and gradients are f32; loss
//! reductions accumulate in f64.

mod graph;
mod serialize;
mod tensor;

pub use graph::{Graph, ParamId, ParamSet, Parameter, VarId, MASKED_RMSE_EPSILON};
pub use serialize::{load_params, save_params, ParamIndex, ParamIndexEntry};
pub use tensor::Tensor4;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: input has {input} channels, weights expect {expected}")]
    ChannelMismatch { input: usize, expected: usize },
    #[error("unsupported kernel size {0}; only 1 and 3 are implemented")]
    UnsupportedKernel(usize),
    #[error("maxpool2 requires even spatial dims, got {h}x{w}")]
    OddSpatial { h: usize, w: usize },
    #[error("backward called before any forward operation was recorded")]
    BackwardBeforeForward,
    #[error("backward already ran on this graph; record a new forward pass")]
    DoubleBackward,
    #[error("backward seed must target a scalar, got shape {0:?}")]
    NotScalar([usize; 4]),
    #[error("masked loss has zero valid pixels; filter such batches upstream")]
    NoValidPixels,
    #[error("parameter index entry '{name}' failed checksum verification")]
    ChecksumMismatch { name: String },
    #[error("parameter file layout invalid: {0}")]
    BadParamFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
