//! Expert fine-tuning with adaptive-moment optimization.
//!
//! The published recipe is fixed here as defaults: learning rate 1e-4,
//! beta1 0.8, beta2 0.888, mini-batch 64, 50 epochs, two-class
//! cross-entropy, no schedule, no augmentation, no early stopping.
//! Everything is seeded: same seed, same data, same final parameters.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{build_backbone, BackboneConfig, BackboneError, ExpertModel, FreezePolicy};
use crate::datamodel::{relabel_for_expert, DatasetManifest, ExpertKind, SampleRecord, Split};
use crate::ingestion::{prepare_input_sized, ImageTensor, IngestError};
use crate::nn::{cross_entropy_with_grad, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            beta1: 0.8,
            beta2: 0.888,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0) || !(0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(TrainError::InvalidConfig("betas must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// The training loss. Two-class cross-entropy is the only variant; the
/// field exists so run configs are fully explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            epochs: 50,
            seed: 0,
            freeze_policy: FreezePolicy::standard(),
            loss: LossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("effective training set is empty for {kind} (after relabeling)")]
    EmptyTrainingSet { kind: ExpertKind },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("failed to ingest sample {sample_id}: {source}")]
    Ingest {
        sample_id: String,
        #[source]
        source: IngestError,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Adaptive-moment estimation over named parameter tensors. Moment slots
/// are keyed by parameter name and allocated on first sight.
pub struct Adam<F> {
    pub config: OptimizerConfig,
    step_count: u64,
    slots: HashMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimization step over whatever parameters the visitor yields.
    /// The update is the bias-corrected form:
    /// `m_hat = m/(1-b1^t)`, `v_hat = v/(1-b2^t)`,
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(
        &mut self,
        visit: impl FnOnce(&mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>, ArrayD<F>)),
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = F::from_f64(self.config.learning_rate);
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let eps = F::from_f64(self.config.epsilon);
        let one = F::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let slots = &mut self.slots;

        visit(&mut |name, mut param, grad| {
            let (m, v) = slots.entry(name.to_string()).or_insert_with(|| {
                (
                    ArrayD::zeros(grad.raw_dim()),
                    ArrayD::zeros(grad.raw_dim()),
                )
            });
            ndarray::Zip::from(&mut *m).and(&grad).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&grad).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            ndarray::Zip::from(&mut param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }
}

/// Deterministic shuffled index batches: a permutation keyed by
/// `(seed, epoch)`, chunked into `batch_size` groups with the final
/// partial batch kept.
pub fn make_batches(n_records: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n_records).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// The effective training pool for one expert: TRAIN-split records with a
/// defined binary relabel (cosmetic samples drop out of the lens
/// detector's pool entirely).
pub fn effective_training_pool<'a>(
    records: impl Iterator<Item = &'a SampleRecord>,
    kind: ExpertKind,
) -> Vec<(&'a SampleRecord, usize)> {
    records
        .filter(|r| r.split == Split::Train)
        .filter_map(|r| relabel_for_expert(r.label, kind).map(|b| (r, b.index())))
        .collect()
}

/// Decodes every record once up front, in parallel, preserving order.
fn preload_images(
    pool: &[(&SampleRecord, usize)],
    input_size: usize,
) -> Result<Vec<(ImageTensor, usize)>, TrainError> {
    pool.par_iter()
        .map(|(record, target)| {
            prepare_input_sized(&record.resolved_path, input_size)
                .map(|t| (t, *target))
                .map_err(|source| TrainError::Ingest {
                    sample_id: record.sample_id.clone(),
                    source,
                })
        })
        .collect()
}

/// Fine-tunes one expert on the manifest's TRAIN split under the given
/// freeze policy. Deterministic given the config seed.
pub fn train_expert(
    kind: ExpertKind,
    manifest: &DatasetManifest,
    train_config: &TrainConfig,
    backbone_config: &BackboneConfig,
) -> Result<(ExpertModel<f32>, TrainHistory), TrainError> {
    let pool = effective_training_pool(manifest.records.iter(), kind);
    train_expert_on_pool(kind, &pool, train_config, backbone_config)
}

/// As [`train_expert`] but over an explicit record pool (the evaluation
/// protocols build their own train pools).
pub fn train_expert_on_pool(
    kind: ExpertKind,
    pool: &[(&SampleRecord, usize)],
    train_config: &TrainConfig,
    backbone_config: &BackboneConfig,
) -> Result<(ExpertModel<f32>, TrainHistory), TrainError> {
    train_config.validate()?;
    if pool.is_empty() {
        return Err(TrainError::EmptyTrainingSet { kind });
    }

    let mut model = build_backbone::<f32>(backbone_config, kind)?;
    model.apply_freeze(&train_config.freeze_policy)?;

    let data = preload_images(pool, backbone_config.input_size)?;
    let mut optimizer = Adam::<f32>::new(train_config.optimizer.clone());
    let mut history = TrainHistory::default();

    for epoch in 0..train_config.epochs {
        let start = Instant::now();
        let batches = make_batches(data.len(), train_config.batch_size, train_config.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;

        for (batch_idx, batch) in batches.iter().enumerate() {
            let images: Vec<ImageTensor> =
                batch.iter().map(|&i| data[i].0.clone()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| data[i].1).collect();
            let x = model.batch_to_array(&images)?;

            let logits = model.net.forward_train(&x.view());
            for (row, &t) in logits.rows().into_iter().zip(&targets) {
                let pred = if row[1] > row[0] { 1 } else { 0 };
                if pred == t {
                    correct += 1;
                }
            }
            let (loss, dlogits) = cross_entropy_with_grad(&logits.view(), &targets);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            model.net.backward(&dlogits);
            optimizer.step(|f| model.net.apply_update(f));
        }

        history.epochs.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    model.net.clear_caches();
    Ok((model, history))
}
