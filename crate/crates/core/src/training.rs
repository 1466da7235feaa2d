//! SGD training loop for the compatibility network.
//!
//! Plain SGD with weight decay folded into the gradient, a step-decay
//! learning-rate schedule, and class-balanced batch sampling (judgment
//! classes are heavily skewed, so each draw first picks a class uniformly
//! and then a sample within it). The loss is assembled by
//! [`crate::reasoning::total_loss`], so the optimizer sees second-order
//! gradients whenever the reason term is active.
//!
//! Training is deterministic: the same records, config, and seed produce a
//! bit-identical final model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::compatnet::{forward_batch, init_model, CompatModel, ModelConfig, ModelError};
use crate::evalharness::{evaluate, EvalError};
use crate::reasoning::{total_loss, ReasonError, RegularizerKind};
use crate::record::OutfitRecord;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged { epoch: usize, step: usize, source: AutodiffError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reason(#[from] ReasonError),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error("validation failed: {0}")]
    Eval(#[from] Box<EvalError>),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Optimizer and loss settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Divide the learning rate by 10 every this many epochs.
    pub lr_drop_every: usize,
    pub batch_size: usize,
    /// Weight of the reason regularizer in the total loss.
    pub alpha: f64,
    pub regularizer: RegularizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            weight_decay: 0.0005,
            epochs: 70,
            lr_drop_every: 30,
            batch_size: 64,
            alpha: 1.0,
            regularizer: RegularizerKind::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let complaint = if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            Some("lr0 must be positive and finite")
        } else if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            Some("weight_decay must be non-negative and finite")
        } else if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            Some("alpha must be non-negative and finite")
        } else if self.lr_drop_every == 0 {
            Some("lr_drop_every must be at least 1")
        } else if self.batch_size == 0 {
            Some("batch_size must be at least 1")
        } else {
            None
        };
        match complaint {
            Some(c) => Err(TrainError::InvalidConfig(c.to_string())),
            None => Ok(()),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The learning rate in effect for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 10f64.powi(-((epoch / self.lr_drop_every) as i32))
    }
}

/// Draws record indices so each judgment class is seen equally often
/// regardless of how skewed the data is: a class uniformly at random
/// (among classes that have any samples), then a sample uniformly within
/// that class.
pub struct BalancedSampler {
    pools: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(records: &[OutfitRecord], seed: u64) -> Result<Self, TrainError> {
        if records.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let mut by_class: [Vec<usize>; 3] = Default::default();
        for (i, record) in records.iter().enumerate() {
            by_class[record.judgment.index()].push(i);
        }
        let pools: Vec<Vec<usize>> =
            by_class.into_iter().filter(|pool| !pool.is_empty()).collect();
        Ok(BalancedSampler { pools, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn draw(&mut self) -> usize {
        let pool = &self.pools[self.rng.random_range(0..self.pools.len())];
        pool[self.rng.random_range(0..pool.len())]
    }

    pub fn draw_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.draw()).collect()
    }
}

/// One SGD update: `p <- p - lr * (g + weight_decay * p)`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
    for (param, grad) in params.iter_mut().zip(grads) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape must match parameter");
        let data = param.data_mut();
        for (p, g) in data.iter_mut().zip(grad.data()) {
            *p -= lr * (g + weight_decay * *p);
        }
    }
}

/// One row of the metrics log. Accuracies are percentages over the
/// validation set and absent when no validation set was supplied.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub judgment_acc: Option<f64>,
    pub reason_acc: Option<f64>,
}

pub struct TrainOutcome {
    pub model: CompatModel,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch with the highest validation judgment accuracy (earliest on
    /// ties); absent without a validation set.
    pub best_val_epoch: Option<usize>,
}

/// Train a fresh model. `val` adds per-epoch accuracy columns to the
/// metrics log and selects `best_val_epoch`; the returned model is always
/// the final-epoch one.
pub fn train(
    train_records: &[OutfitRecord],
    val: Option<&[OutfitRecord]>,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut model = init_model(model_config, config.seed)?;
    let partition = model_config.partition();
    // The sampler gets its own stream so drawing order is independent of
    // initialization.
    let mut sampler = BalancedSampler::new(train_records, config.seed.wrapping_add(1))?;
    let steps_per_epoch = train_records.len().div_ceil(config.batch_size);

    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;
        for step in 0..steps_per_epoch {
            let indices = sampler.draw_batch(config.batch_size);
            let batch: Vec<&OutfitRecord> = indices.iter().map(|&i| &train_records[i]).collect();
            let step_result = (|| -> Result<f64, TrainError> {
                let mut g = Graph::new();
                let pass = forward_batch(&mut g, &model, &batch)?;
                let loss =
                    total_loss(&mut g, &pass, &batch, config.alpha, config.regularizer, &partition)?;
                let params = pass.vars.all();
                let grads = g.grad(loss.total, &params, false)?;
                let grad_values: Vec<Tensor> =
                    grads.into_iter().map(|h| g.value(h).clone()).collect();
                sgd_step(&mut model.param_tensors_mut(), &grad_values, lr, config.weight_decay);
                Ok(g.value(loss.total).item())
            })();
            // The graph refuses to materialize non-finite values, so a
            // blown-up run surfaces here; tag it with where it happened.
            loss_sum += step_result.map_err(|e| match e {
                TrainError::Graph(source @ AutodiffError::NonFinite { .. })
                | TrainError::Model(ModelError::Graph(source @ AutodiffError::NonFinite { .. }))
                | TrainError::Reason(ReasonError::Graph(
                    source @ AutodiffError::NonFinite { .. },
                )) => TrainError::Diverged { epoch, step, source },
                other => other,
            })?;
        }
        let (judgment_acc, reason_acc) = match val {
            Some(records) => {
                let eval = evaluate(&model, records, config.batch_size).map_err(Box::new)?;
                (Some(eval.judgment_accuracy), eval.reason_accuracy)
            }
            None => (None, None),
        };
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            judgment_acc,
            reason_acc,
        });
    }

    let best_val_epoch = metrics
        .iter()
        .filter_map(|m| m.judgment_acc.map(|acc| (m.epoch, acc)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(epoch, _)| epoch);

    Ok(TrainOutcome { model, metrics, best_val_epoch })
}

/// Serialize the metrics log as CSV. Missing accuracies become empty
/// cells.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,judgment_acc,reason_acc\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch,
            m.loss,
            cell(m.judgment_acc),
            cell(m.reason_acc)
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<(), std::io::Error> {
    std::fs::write(path, metrics_csv(metrics))
}
