//! The encoder–decoder regressor in three width variants, plus the masked
//! training objective.
//!
//! Topology for an 8×8 input with channel triple (c1, c2, c3):
//!
//! ```text
//! enc1: [conv3 in→c1, conv3 c1→c1]          @ 8×8 ──┐ skip
//! pool                                       @ 4×4   │
//! enc2: [conv3 c1→c2, conv3 c2→c2]          @ 4×4 ──┼─┐ skip
//! pool                                       @ 2×2   │ │
//! bottleneck: [conv3 c2→c3, conv3 c3→c3]    @ 2×2   │ │
//! up2 (transposed 2×2, c3→c2), concat ───────────────┘ │
//! dec2: [conv3 2·c2→c2, conv3 c2→c2]        @ 4×4      │
//! up1 (transposed 2×2, c2→c1), concat ─────────────────┘
//! dec1: [conv3 2·c1→c1, conv3 c1→c1]        @ 8×8
//! head: conv1 c1→1                           @ 8×8
//! ```
//!
//! Two pooling levels are the only depth an 8×8 patch admits before the
//! bottleneck reaches 2×2, which is also why exactly three widths configure
//! a variant. Activations follow every convolution except the head.

use crate::autodiff::{
    load_params, save_params, AutodiffError, Graph, ParamId, ParamIndex, ParamSet, Tensor4, VarId,
};
use crate::seeding::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("channel widths {0:?} must be strictly increasing and positive")]
    BadWidths([usize; 3]),
    #[error("unknown width variant '{0}'; expected small, baseline, or large")]
    UnknownVariant(String),
    #[error("input has {got} channels, model expects {expected}")]
    InputChannels { expected: usize, got: usize },
    #[error("input spatial dims {h}x{w} must be positive multiples of 4")]
    InputSpatial { h: usize, w: usize },
    #[error("prediction shape {pred:?} does not match labels {labels:?}")]
    LabelShape {
        pred: [usize; 4],
        labels: [usize; 4],
    },
    #[error("checkpoint header mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Activation applied after every convolution except the output head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Relu,
    LeakyRelu { negative_slope: f32 },
}

impl Activation {
    fn slope(&self) -> f32 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu { negative_slope } => *negative_slope,
        }
    }
}

/// Encoder channel widths for one model variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthConfig {
    pub name: String,
    pub channels: [usize; 3],
}

impl WidthConfig {
    pub fn new(name: &str, channels: [usize; 3]) -> Result<Self, UNetError> {
        if channels[0] == 0 || channels[0] >= channels[1] || channels[1] >= channels[2] {
            return Err(UNetError::BadWidths(channels));
        }
        Ok(Self {
            name: name.to_string(),
            channels,
        })
    }

    pub fn small() -> Self {
        Self::new("small", [4, 8, 16]).expect("preset is valid")
    }

    pub fn baseline() -> Self {
        Self::new("baseline", [24, 36, 48]).expect("preset is valid")
    }

    pub fn large() -> Self {
        Self::new("large", [72, 84, 96]).expect("preset is valid")
    }

    pub fn by_name(name: &str) -> Result<Self, UNetError> {
        match name {
            "small" => Ok(Self::small()),
            "baseline" => Ok(Self::baseline()),
            "large" => Ok(Self::large()),
            other => Err(UNetError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    enc1: [ConvIds; 2],
    enc2: [ConvIds; 2],
    bottleneck: [ConvIds; 2],
    up2: ConvIds,
    dec2: [ConvIds; 2],
    up1: ConvIds,
    dec1: [ConvIds; 2],
    head: ConvIds,
}

/// The model: a parameter set plus the wiring to run it on a graph.
#[derive(Clone, Debug)]
pub struct UNetModel {
    pub config: WidthConfig,
    pub input_channels: usize,
    pub activation: Activation,
    pub seed: u64,
    pub params: ParamSet,
    ids: LayerIds,
}

/// Build a model with He-uniform weights (bound √(6/fan_in), fan_in =
/// c_in·k²) and zero biases, drawn from one seeded stream in topology order.
pub fn build_model(
    config: &WidthConfig,
    input_channels: usize,
    seed: u64,
) -> Result<UNetModel, UNetError> {
    // Re-validate; configs can arrive from deserialized files.
    let config = WidthConfig::new(&config.name, config.channels)?;
    let [c1, c2, c3] = config.channels;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "unet-init"));
    let mut params = ParamSet::new();

    fn conv(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
    ) -> ConvIds {
        let bound = (6.0 / (cin * k * k) as f64).sqrt() as f32;
        let len = cout * cin * k * k;
        let data: Vec<f32> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        let w = params.add(
            format!("{name}.weight"),
            Tensor4::from_vec([cout, cin, k, k], data).expect("shape matches data"),
        );
        let b = params.add(format!("{name}.bias"), Tensor4::zeros([cout, 1, 1, 1]));
        ConvIds { w, b }
    }
    // Transposed conv weights are [c_in, c_out, 2, 2]; fan_in is c_in·k².
    fn upconv(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> ConvIds {
        let bound = (6.0 / (cin * 4) as f64).sqrt() as f32;
        let len = cin * cout * 4;
        let data: Vec<f32> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        let w = params.add(
            format!("{name}.weight"),
            Tensor4::from_vec([cin, cout, 2, 2], data).expect("shape matches data"),
        );
        let b = params.add(format!("{name}.bias"), Tensor4::zeros([cout, 1, 1, 1]));
        ConvIds { w, b }
    }

    let p = &mut params;
    let r = &mut rng;
    let ids = LayerIds {
        enc1: [
            conv(p, r, "enc1.conv1", c1, input_channels, 3),
            conv(p, r, "enc1.conv2", c1, c1, 3),
        ],
        enc2: [
            conv(p, r, "enc2.conv1", c2, c1, 3),
            conv(p, r, "enc2.conv2", c2, c2, 3),
        ],
        bottleneck: [
            conv(p, r, "bottleneck.conv1", c3, c2, 3),
            conv(p, r, "bottleneck.conv2", c3, c3, 3),
        ],
        up2: upconv(p, r, "dec2.up", c3, c2),
        dec2: [
            conv(p, r, "dec2.conv1", c2, 2 * c2, 3),
            conv(p, r, "dec2.conv2", c2, c2, 3),
        ],
        up1: upconv(p, r, "dec1.up", c2, c1),
        dec1: [
            conv(p, r, "dec1.conv1", c1, 2 * c1, 3),
            conv(p, r, "dec1.conv2", c1, c1, 3),
        ],
        head: conv(p, r, "head", 1, c1, 1),
    };

    Ok(UNetModel {
        config,
        input_channels,
        activation: Activation::Relu,
        seed,
        params,
        ids,
    })
}

impl UNetModel {
    /// Exact number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Record the forward pass for a batch onto `graph`. Input must be
    /// `[N, input_channels, H, W]` with H, W positive multiples of 4;
    /// output is `[N, 1, H, W]`.
    pub fn forward(&self, graph: &mut Graph, input: VarId) -> Result<VarId, UNetError> {
        let [_, c, h, w] = graph.value(input).shape();
        if c != self.input_channels {
            return Err(UNetError::InputChannels {
                expected: self.input_channels,
                got: c,
            });
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(UNetError::InputSpatial { h, w });
        }
        let slope = self.activation.slope();
        let p = &self.params;

        let double_conv = |graph: &mut Graph,
                               x: VarId,
                               convs: &[ConvIds; 2]|
         -> Result<VarId, AutodiffError> {
            let x = graph.conv2d(p, x, convs[0].w, convs[0].b, 1)?;
            let x = graph.leaky_relu(x, slope);
            let x = graph.conv2d(p, x, convs[1].w, convs[1].b, 1)?;
            Ok(graph.leaky_relu(x, slope))
        };

        let e1 = double_conv(graph, input, &self.ids.enc1)?;
        let p1 = graph.maxpool2(e1)?;
        let e2 = double_conv(graph, p1, &self.ids.enc2)?;
        let p2 = graph.maxpool2(e2)?;
        let bt = double_conv(graph, p2, &self.ids.bottleneck)?;

        let u2 = graph.upsample2(p, bt, self.ids.up2.w, self.ids.up2.b)?;
        let cat2 = graph.concat_channels(u2, e2)?;
        let d2 = double_conv(graph, cat2, &self.ids.dec2)?;

        let u1 = graph.upsample2(p, d2, self.ids.up1.w, self.ids.up1.b)?;
        let cat1 = graph.concat_channels(u1, e1)?;
        let d1 = double_conv(graph, cat1, &self.ids.dec1)?;

        Ok(graph.conv2d(p, d1, self.ids.head.w, self.ids.head.b, 0)?)
    }

    /// Inference-only forward pass on a throwaway graph.
    pub fn predict(&self, input: &Tensor4) -> Result<Tensor4, UNetError> {
        let mut graph = Graph::new();
        let x = graph.input(input.clone());
        let y = self.forward(&mut graph, x)?;
        Ok(graph.value(y).clone())
    }
}

/// Masked RMSE objective over a batch.
///
/// `labels` must match the prediction's `[N, 1, H, W]` shape and `mask` its
/// pixel count. Invalid pixels influence neither the value nor any gradient.
/// Returns the loss node and its f64 value.
pub fn masked_rmse_loss(
    graph: &mut Graph,
    prediction: VarId,
    labels: &Tensor4,
    mask: &[bool],
) -> Result<(VarId, f64), UNetError> {
    let pred_shape = graph.value(prediction).shape();
    if pred_shape != labels.shape() {
        return Err(UNetError::LabelShape {
            pred: pred_shape,
            labels: labels.shape(),
        });
    }
    let loss = graph.masked_rmse(prediction, labels, mask)?;
    let value = graph
        .scalar_value(loss)
        .expect("masked_rmse records its value");
    Ok((loss, value))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header saved next to the parameter payload.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config: WidthConfig,
    pub input_channels: usize,
    pub activation: Activation,
    pub seed: u64,
    pub parameter_count: usize,
    /// Checksum of the channel schema the model was trained against.
    pub input_schema_sha256: String,
    /// Checksum of the pipeline configuration that produced this model.
    pub config_sha256: String,
}

pub fn checkpoint_files(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf)
{
    (
        dir.join("checkpoint.bin"),
        dir.join("checkpoint_index.json"),
        dir.join("checkpoint_header.json"),
    )
}

pub fn save_checkpoint(
    model: &UNetModel,
    dir: &Path,
    input_schema_sha256: &str,
    config_sha256: &str,
) -> Result<ParamIndex, UNetError> {
    std::fs::create_dir_all(dir)?;
    let (bin, index, header_path) = checkpoint_files(dir);
    let param_index = save_params(&model.params, &bin, &index)?;
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        input_channels: model.input_channels,
        activation: model.activation,
        seed: model.seed,
        parameter_count: model.parameter_count(),
        input_schema_sha256: input_schema_sha256.to_string(),
        config_sha256: config_sha256.to_string(),
    };
    std::fs::write(&header_path, serde_json::to_string_pretty(&header)?)?;
    Ok(param_index)
}

/// Load a checkpoint: rebuild the topology from the header, then overwrite
/// every parameter by name from the verified payload.
pub fn load_checkpoint(dir: &Path) -> Result<(UNetModel, CheckpointHeader), UNetError> {
    let (bin, index, header_path) = checkpoint_files(dir);
    let header: CheckpointHeader =
        serde_json::from_str(&std::fs::read_to_string(&header_path)?)?;
    let loaded = load_params(&bin, &index)?;
    let mut model = build_model(&header.config, header.input_channels, header.seed)?;
    model.activation = header.activation;
    if loaded.len() != model.params.len() {
        return Err(UNetError::CheckpointMismatch(format!(
            "payload has {} parameters, topology needs {}",
            loaded.len(),
            model.params.len()
        )));
    }
    for stored in loaded.iter() {
        let id = model.params.find(&stored.name).ok_or_else(|| {
            UNetError::CheckpointMismatch(format!("unexpected parameter '{}'", stored.name))
        })?;
        if model.params.value(id).shape() != stored.value.shape() {
            return Err(UNetError::CheckpointMismatch(format!(
                "parameter '{}' has shape {:?}, topology needs {:?}",
                stored.name,
                stored.value.shape(),
                model.params.value(id).shape()
            )));
        }
        *model.params.value_mut(id) = stored.value.clone();
    }
    if model.parameter_count() != header.parameter_count {
        return Err(UNetError::CheckpointMismatch(format!(
            "header claims {} parameters, payload holds {}",
            header.parameter_count,
            model.parameter_count()
        )));
    }
    Ok((model, header))
}
