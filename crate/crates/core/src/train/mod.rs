//! Pairwise training loop with validation-based early stopping, plus
//! fine-tuning on a fraction of a shifted dataset with parameter-movement
//! reporting.

mod adam;
pub mod checkpoint;
pub mod transfer;

pub use adam::{Adam, AdamConfig};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairSampler};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{batch_gradients, score_dataset, LossBreakdown, PairwiseModel};
use crate::ood::GroupRule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    pub optimizer: AdamConfig,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 30,
            steps_per_epoch: 50,
            optimizer: AdamConfig::default(),
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train config: {name} must be positive")));
            }
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!(
                "train config: learning rate {} must be positive",
                self.optimizer.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss components over the epoch's steps.
    pub loss: LossBreakdown,
    pub val_auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub history: Vec<EpochLog>,
    /// Pairs whose negative came from the global pool because the user had
    /// no negatives of their own.
    pub fallback_pairs: usize,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut out = LossBreakdown::default();
    for p in parts {
        out.bpr += p.bpr / n;
        out.discrepancy += p.discrepancy / n;
        out.weak += p.weak / n;
        out.l2 += p.l2 / n;
        out.total += p.total / n;
    }
    out
}

/// Validation AUC of the model's scores.
pub fn validation_auc(model: &(impl PairwiseModel + ?Sized), val: &Dataset) -> Result<f64> {
    let scored = score_dataset(model, val);
    metrics::auc(&scored.scores, &scored.labels)
}

/// Train with Adam on sampled positive/negative pairs. Stops when the
/// validation AUC fails to improve for `patience` consecutive epochs and
/// leaves the model at its best-validation parameters.
pub fn train(
    model: &mut dyn PairwiseModel,
    train_ds: &Dataset,
    val_ds: &Dataset,
    weak_rule: Option<&GroupRule>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_ds.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let sampler = PairSampler::new(train_ds)?;
    let mut opt = Adam::new(model.params(), cfg.optimizer);

    let mut best_params = model.params().clone();
    let mut best_val_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_without_gain = 0usize;
    let mut history = Vec::new();
    let mut fallback_pairs = 0usize;

    let mut epochs_run = 0usize;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut parts = Vec::with_capacity(cfg.steps_per_epoch);
        for step in 0..cfg.steps_per_epoch {
            let batch = sampler.sample(
                train_ds,
                cfg.batch_size,
                derive_seed(cfg.seed, epoch as u64, step as u64),
            );
            fallback_pairs += batch.fallback_count;
            let (grads, breakdown) = batch_gradients(model, train_ds, &batch, weak_rule)?;
            opt.step(model.params_mut(), &grads);
            parts.push(breakdown);
        }
        let val_auc = validation_auc(model, val_ds)?;
        history.push(EpochLog { epoch, loss: mean_breakdown(&parts), val_auc });

        if val_auc > best_val_auc {
            best_val_auc = val_auc;
            best_epoch = epoch;
            best_params = model.params().clone();
            epochs_without_gain = 0;
        } else {
            epochs_without_gain += 1;
            if epochs_without_gain >= cfg.patience {
                break;
            }
        }
    }

    *model.params_mut() = best_params;
    Ok(TrainOutcome { epochs_run, best_epoch, best_val_auc, history, fallback_pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    /// Fraction of the target dataset made available for adaptation.
    pub fraction: f64,
    /// Fixed number of passes; fine-tuning does not early-stop.
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            fraction: 0.1,
            epochs: 3,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FineTuneOutcome {
    pub subset_size: usize,
    pub steps_run: usize,
    /// Euclidean parameter movement per parameter group.
    pub group_distances: BTreeMap<String, f64>,
    /// Per-prototype-row movement, when the model has prototypes.
    pub prototype_rows: Option<Vec<f64>>,
}

/// Adapt a trained model to a fraction of a target dataset with a fresh
/// optimizer and a fixed epoch budget, reporting how far each parameter
/// group moved. A subset lacking either class runs zero steps.
pub fn fine_tune(
    model: &mut dyn PairwiseModel,
    target: &Dataset,
    weak_rule: Option<&GroupRule>,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("fine-tune config: epochs and batch_size must be positive".into()));
    }
    if !(cfg.optimizer.lr > 0.0) {
        return Err(Error::Config(format!(
            "fine-tune config: learning rate {} must be positive",
            cfg.optimizer.lr
        )));
    }
    let subset = target.subsample(cfg.fraction, derive_seed(cfg.seed, 0xF17E, 0))?;
    let before = model.params().clone();
    let mut steps_run = 0usize;

    match PairSampler::new(&subset) {
        Ok(sampler) => {
            let mut opt = Adam::new(model.params(), cfg.optimizer);
            let steps_per_epoch = subset.len().div_ceil(cfg.batch_size).max(1);
            for epoch in 0..cfg.epochs {
                for step in 0..steps_per_epoch {
                    let batch = sampler.sample(
                        &subset,
                        cfg.batch_size,
                        derive_seed(cfg.seed, epoch as u64, step as u64),
                    );
                    let (grads, _) = batch_gradients(model, &subset, &batch, weak_rule)?;
                    opt.step(model.params_mut(), &grads);
                    steps_run += 1;
                }
            }
        }
        // A one-class subset cannot form pairs: adaptation is a no-op.
        Err(Error::Data(_)) => {}
        Err(e) => return Err(e),
    }

    Ok(FineTuneOutcome {
        subset_size: subset.len(),
        steps_run,
        group_distances: transfer::group_distances(&before, model.params()),
        prototype_rows: transfer::prototype_row_distances(&before, model.params()),
    })
}
