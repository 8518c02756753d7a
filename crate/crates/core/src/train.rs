//! Optimization loop: Adam with bias correction, early stopping on
//! validation loss, best-weights restoration, and energy instrumentation.

use crate::autodiff::{Graph, ParamSet, Tensor4};
use crate::green::{EnergySample, GreenError};
use crate::preprocess::{augment_flips, DatasetSplit, LabeledPatch};
use crate::raster::PATCH_SIZE;
use crate::seeding::derive_seed;
use crate::unet::{masked_rmse_loss, UNetError, UNetModel};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("patience ({patience}) must be smaller than max_epochs ({max_epochs})")]
    BadPatience { patience: usize, max_epochs: usize },
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error("{partition} partition is empty")]
    EmptyPartition { partition: &'static str },
    #[error("NaN gradient in parameter '{0}'")]
    NanGradient(String),
    #[error("validation loss became NaN at epoch {0}")]
    NanValidation(usize),
    #[error("Adam state tracks {state} parameters, set has {params}")]
    StateMismatch { state: usize, params: usize },
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Green(#[from] GreenError),
}

fn default_learning_rate() -> f64 {
    1e-3
}
fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    10
}
fn default_batch_size() -> usize {
    64
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_epsilon() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_epsilon")]
    pub adam_epsilon: f64,
    /// Optional seeded cap on the number of training patches per run; used
    /// by desk-scale configurations to bound wall time. `None` trains on
    /// the full partition.
    #[serde(default)]
    pub max_train_patches: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch_size(),
            seed: 0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_adam_epsilon(),
            max_train_patches: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadLearningRate(self.learning_rate));
        }
        if self.patience >= self.max_epochs {
            return Err(TrainError::BadPatience {
                patience: self.patience,
                max_epochs: self.max_epochs,
            });
        }
        if self.batch_size == 0 {
            return Err(TrainError::ZeroBatchSize);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second-moment accumulators, one pair per parameter, plus the step
/// counter driving bias correction.
pub struct AdamState {
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One Adam update over every parameter gradient, with bias correction;
/// gradients are zeroed afterwards. A NaN gradient aborts, naming the
/// parameter.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<(), TrainError> {
    if state.m.len() != params.len() {
        return Err(TrainError::StateMismatch {
            state: state.m.len(),
            params: params.len(),
        });
    }
    for p in params.iter() {
        if p.grad.data().iter().any(|g| g.is_nan()) {
            return Err(TrainError::NanGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (idx, p) in params.params_mut().iter_mut().enumerate() {
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let grad = p.grad.data_mut();
        let theta = p.value.data_mut();
        for i in 0..grad.len() {
            let g = grad[i] as f64;
            let mi = state.beta1 * m[i] as f64 + (1.0 - state.beta1) * g;
            let vi = state.beta2 * v[i] as f64 + (1.0 - state.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            theta[i] = (theta[i] as f64 - learning_rate * m_hat / (v_hat.sqrt() + state.epsilon))
                as f32;
            grad[i] = 0.0;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Patience bookkeeping. "Improvement" is a strictly lower validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best_validation_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    /// The improvement streak ran out; stop after this epoch.
    Stop,
}

impl EarlyStopState {
    pub fn new() -> Self {
        Self {
            best_validation_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    /// Returns whether this epoch improved, and the stop decision for the
    /// given patience.
    pub fn update(&mut self, epoch: usize, validation_loss: f64, patience: usize) -> (bool, StopDecision) {
        let improved = validation_loss < self.best_validation_loss;
        if improved {
            self.best_validation_loss = validation_loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= patience {
            (improved, StopDecision::Stop)
        } else {
            (improved, StopDecision::Continue)
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Energy instrumentation
// ---------------------------------------------------------------------------

/// Where a run's joules come from. The profiling hardware the figures would
/// ideally come from is not always available, so an estimation mode derives
/// joules from wall time and an assumed device power; reports carry the
/// provenance either way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum EnergySource {
    Measured { joules: f64 },
    Estimated { power_watts: f64 },
}

impl EnergySource {
    pub fn sample(&self, run_id: &str, wall_seconds: f64) -> Result<EnergySample, GreenError> {
        match self {
            EnergySource::Measured { joules } => {
                EnergySample::measured(run_id, *joules, wall_seconds)
            }
            EnergySource::Estimated { power_watts } => {
                EnergySample::estimated(run_id, wall_seconds, *power_watts)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch masked RMSE losses seen while optimizing.
    pub train_loss: f64,
    /// Pooled masked RMSE over the whole validation partition.
    pub validation_loss: f64,
    pub epochs_since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub variant: String,
    pub config: TrainConfig,
    pub parameter_count: usize,
    pub trained_patches: usize,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub wall_seconds: f64,
    pub energy: EnergySample,
    pub checkpoint_path: Option<String>,
    pub config_sha256: Option<String>,
}

/// Assemble `[B, C, 8, 8]` inputs, `[B, 1, 8, 8]` labels, and the label mask
/// for a batch of pool indices, optionally flip-augmenting each patch with a
/// seed drawn from `augment_rng`.
pub fn batch_tensors(
    pool: &[LabeledPatch],
    indices: &[usize],
    mut augment_rng: Option<&mut ChaCha20Rng>,
) -> (Tensor4, Tensor4, Vec<bool>) {
    let b = indices.len();
    let channels = pool[indices[0]].channels;
    let pixels = PATCH_SIZE * PATCH_SIZE;
    let mut input = Vec::with_capacity(b * channels * pixels);
    let mut labels = Vec::with_capacity(b * pixels);
    let mut mask = Vec::with_capacity(b * pixels);
    for &idx in indices {
        let patch = match augment_rng.as_deref_mut() {
            Some(rng) => augment_flips(&pool[idx], rng.next_u64()),
            None => pool[idx].clone(),
        };
        input.extend_from_slice(&patch.input);
        labels.extend_from_slice(&patch.label);
        mask.extend_from_slice(&patch.label_mask);
    }
    let input = Tensor4::from_vec([b, channels, PATCH_SIZE, PATCH_SIZE], input)
        .expect("batch layout is consistent");
    let labels = Tensor4::from_vec([b, 1, PATCH_SIZE, PATCH_SIZE], labels)
        .expect("batch layout is consistent");
    (input, labels, mask)
}

/// Pooled masked squared error over a partition: (Σ squared error, Σ valid).
fn masked_sse(
    model: &UNetModel,
    pool: &[LabeledPatch],
    indices: &[usize],
    batch_size: usize,
) -> Result<(f64, usize), UNetError> {
    let mut sse = 0.0f64;
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (input, labels, mask) = batch_tensors(pool, chunk, None);
        let pred = model.predict(&input)?;
        for ((p, l), m) in pred.data().iter().zip(labels.data()).zip(&mask) {
            if *m {
                let d = *p as f64 - *l as f64;
                sse += d * d;
                count += 1;
            }
        }
    }
    Ok((sse, count))
}

/// Pooled masked RMSE with the loss module's epsilon guard, so a restored
/// checkpoint reproduces its recorded validation loss exactly.
pub fn pooled_masked_rmse(
    model: &UNetModel,
    pool: &[LabeledPatch],
    indices: &[usize],
    batch_size: usize,
) -> Result<f64, UNetError> {
    let (sse, count) = masked_sse(model, pool, indices, batch_size)?;
    Ok((sse / count as f64 + crate::autodiff::MASKED_RMSE_EPSILON).sqrt())
}

/// Run the optimization loop over a standardized patch pool.
///
/// Per epoch: seeded shuffle of the train indices, on-the-fly flip
/// augmentation, Adam on the masked RMSE per batch (incomplete final batch
/// included), then an un-augmented pooled validation pass feeding the early
/// stopper. On stop, the best epoch's weights are restored into `model`.
pub fn train_loop(
    model: &mut UNetModel,
    pool: &[LabeledPatch],
    split: &DatasetSplit,
    config: &TrainConfig,
    energy: &EnergySource,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyPartition { partition: "train" });
    }
    if split.validation.is_empty() {
        return Err(TrainError::EmptyPartition {
            partition: "validation",
        });
    }
    let start = std::time::Instant::now();

    let mut train_indices: Vec<usize> = split.train.clone();
    if let Some(cap) = config.max_train_patches {
        if cap < train_indices.len() {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "train/subsample"));
            train_indices.shuffle(&mut rng);
            train_indices.truncate(cap);
            train_indices.sort_unstable();
        }
    }

    let mut adam = AdamState::new(
        &model.params,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    );
    let mut stopper = EarlyStopState::new();
    let mut best_snapshot = model.params.snapshot_values();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let mut order = train_indices.clone();
        let mut epoch_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(config.seed, &format!("train/epoch-{epoch}")));
        order.shuffle(&mut epoch_rng);

        let mut batch_losses = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (input, labels, mask) = batch_tensors(pool, chunk, Some(&mut epoch_rng));
            let mut graph = Graph::new();
            let x = graph.input(input);
            let pred = model.forward(&mut graph, x)?;
            let (loss, value) = masked_rmse_loss(&mut graph, pred, &labels, &mask)?;
            graph
                .backward(&mut model.params, loss, 1.0)
                .map_err(UNetError::from)?;
            adam_step(&mut model.params, &mut adam, config.learning_rate)?;
            batch_losses += value;
            batches += 1;
        }
        let train_loss = batch_losses / batches as f64;

        let validation_loss =
            pooled_masked_rmse(model, pool, &split.validation, config.batch_size)?;
        if validation_loss.is_nan() {
            return Err(TrainError::NanValidation(epoch));
        }

        let (improved, decision) = stopper.update(epoch, validation_loss, config.patience);
        if improved {
            best_snapshot = model.params.snapshot_values();
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            epochs_since_improvement: stopper.epochs_since_improvement,
        };
        on_epoch(&record);
        epochs.push(record);
        if decision == StopDecision::Stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    model.params.restore_values(&best_snapshot);
    let wall_seconds = start.elapsed().as_secs_f64();
    let run_id = format!("{}-seed{}", model.config.name, config.seed);
    let energy_sample = energy.sample(&run_id, wall_seconds)?;

    Ok(TrainReport {
        schema_version: 1,
        variant: model.config.name.clone(),
        config: config.clone(),
        parameter_count: model.parameter_count(),
        trained_patches: train_indices.len(),
        epochs,
        stop_reason,
        best_epoch: stopper.best_epoch,
        best_validation_loss: stopper.best_validation_loss,
        wall_seconds,
        energy: energy_sample,
        checkpoint_path: None,
        config_sha256: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::PatchOrigin;
    use crate::unet::{build_model, WidthConfig};

    #[test]
    fn adam_zero_gradient_leaves_parameters_and_increments_t() {
        let mut params = ParamSet::new();
        params.add("w", Tensor4::from_vec([1, 1, 1, 2], vec![1.5, -2.0]).unwrap());
        let mut state = AdamState::new(&params, 0.9, 0.999, 1e-8);
        adam_step(&mut params, &mut state, 1e-3).unwrap();
        assert_eq!(state.t, 1);
        assert_eq!(params.value(crate::autodiff::ParamId(0)).data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // Bias-corrected Adam: with constant gradient g, the first update is
        // lr·g/(|g| + ε·√corr) ≈ lr.
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor4::scalar(0.0));
        params.params_mut()[0].grad.data_mut()[0] = 3.7;
        let mut state = AdamState::new(&params, 0.9, 0.999, 1e-8);
        let lr = 1e-3;
        adam_step(&mut params, &mut state, lr).unwrap();
        let delta = params.value(id).data()[0].abs() as f64;
        assert!((delta - lr).abs() < 1e-6, "first step {delta} vs lr {lr}");
        // Gradients are zeroed after the step.
        assert_eq!(params.grad(id).data()[0], 0.0);
    }

    #[test]
    fn adam_rejects_nan_gradient_naming_parameter() {
        let mut params = ParamSet::new();
        params.add("enc1.conv1.weight", Tensor4::scalar(0.0));
        params.params_mut()[0].grad.data_mut()[0] = f32::NAN;
        let mut state = AdamState::new(&params, 0.9, 0.999, 1e-8);
        match adam_step(&mut params, &mut state, 1e-3) {
            Err(TrainError::NanGradient(name)) => assert_eq!(name, "enc1.conv1.weight"),
            other => panic!("expected NanGradient, got {other:?}"),
        }
    }

    #[test]
    fn early_stop_patience_arithmetic() {
        // Validation improves at epochs 1..3 and never again; with patience
        // 10 the loop stops after epoch 13 with epoch 3 as best.
        let mut state = EarlyStopState::new();
        let mut stopped_at = None;
        for epoch in 1..=200 {
            let loss = match epoch {
                1 => 5.0,
                2 => 4.8,
                3 => 4.5,
                _ => 4.6,
            };
            let (_, decision) = state.update(epoch, loss, 10);
            if decision == StopDecision::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(13));
        assert_eq!(state.best_epoch, 3);
        assert_eq!(state.best_validation_loss, 4.5);
    }

    #[test]
    fn strictly_decreasing_loss_never_stops_early() {
        let mut state = EarlyStopState::new();
        for epoch in 1..=200 {
            let (_, decision) = state.update(epoch, 100.0 / epoch as f64, 10);
            assert_eq!(decision, StopDecision::Continue);
        }
        assert_eq!(state.best_epoch, 200);
    }

    #[test]
    fn config_validation() {
        let mut config = TrainConfig::default();
        assert!(config.validate().is_ok());
        config.patience = 200;
        assert!(matches!(
            config.validate(),
            Err(TrainError::BadPatience { .. })
        ));
        let config = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            config.validate(),
            Err(TrainError::BadLearningRate(_))
        ));
    }

    fn tiny_pool(n: usize, channels: usize, seed: u64) -> Vec<LabeledPatch> {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let base: f32 = rng.gen_range(-1.0..1.0);
                LabeledPatch {
                    channels,
                    input: (0..channels * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    label: vec![base; 64],
                    label_mask: vec![true; 64],
                    origin: PatchOrigin {
                        parcel_id: format!("p{}", i % 3),
                        phase: 2,
                        row: i as u32,
                        col: 0,
                    },
                }
            })
            .collect()
    }

    fn tiny_split(pool_len: usize) -> DatasetSplit {
        let train: Vec<usize> = (0..pool_len - 4).collect();
        let validation: Vec<usize> = (pool_len - 4..pool_len).collect();
        DatasetSplit {
            train,
            validation,
            test: vec![],
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
            bins: 1,
            bin_edges: vec![],
            test_parcels: vec![],
        }
    }

    #[test]
    fn training_is_deterministic_and_restores_best_weights() {
        let pool = tiny_pool(16, 18, 3);
        let split = tiny_split(pool.len());
        let config = TrainConfig {
            max_epochs: 5,
            patience: 4,
            batch_size: 4,
            seed: 77,
            ..TrainConfig::default()
        };
        let energy = EnergySource::Estimated { power_watts: 10.0 };

        let run = || {
            let mut model = build_model(&WidthConfig::small(), 18, 9).unwrap();
            let report =
                train_loop(&mut model, &pool, &split, &config, &energy, |_| {}).unwrap();
            (model, report)
        };
        let (model_a, report_a) = run();
        let (model_b, report_b) = run();
        for (pa, pb) in model_a.params.iter().zip(model_b.params.iter()) {
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(report_a.epochs.len(), report_b.epochs.len());
        assert_eq!(report_a.epochs, report_b.epochs);

        // The restored model's pooled validation RMSE equals the recorded
        // best exactly.
        let revalidated =
            pooled_masked_rmse(&model_a, &pool, &split.validation, config.batch_size).unwrap();
        assert_eq!(revalidated.to_bits(), report_a.best_validation_loss.to_bits());
        // Report lengths line up with the recorded loss curves.
        assert_eq!(report_a.epochs.len(), report_a.epochs.last().unwrap().epoch);
    }

    #[test]
    fn validation_is_unaugmented_and_repeatable() {
        let pool = tiny_pool(12, 18, 5);
        let split = tiny_split(pool.len());
        let model = build_model(&WidthConfig::small(), 18, 1).unwrap();
        let a = pooled_masked_rmse(&model, &pool, &split.validation, 4).unwrap();
        let b = pooled_masked_rmse(&model, &pool, &split.validation, 4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_partitions_are_rejected() {
        let pool = tiny_pool(8, 18, 1);
        let mut split = tiny_split(pool.len());
        split.validation.clear();
        let mut model = build_model(&WidthConfig::small(), 18, 1).unwrap();
        let err = train_loop(
            &mut model,
            &pool,
            &split,
            &TrainConfig {
                max_epochs: 2,
                patience: 1,
                ..TrainConfig::default()
            },
            &EnergySource::Measured { joules: 0.0 },
            |_| {},
        );
        assert!(matches!(
            err,
            Err(TrainError::EmptyPartition {
                partition: "validation"
            })
        ));
    }

    #[test]
    fn max_train_patches_caps_the_partition() {
        let pool = tiny_pool(16, 18, 3);
        let split = tiny_split(pool.len());
        let config = TrainConfig {
            max_epochs: 2,
            patience: 1,
            batch_size: 4,
            max_train_patches: Some(5),
            ..TrainConfig::default()
        };
        let mut model = build_model(&WidthConfig::small(), 18, 2).unwrap();
        let report = train_loop(
            &mut model,
            &pool,
            &split,
            &config,
            &EnergySource::Measured { joules: 1.0 },
            |_| {},
        )
        .unwrap();
        assert_eq!(report.trained_patches, 5);
    }
}
