use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState, FreezeMask};
use super::ewc::EwcState;
use crate::autodiff::ParamStore;
use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            patience: 3,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Validation accuracy of the restored parameters.
    pub best_valid_accuracy: f64,
    /// `0` means the starting parameters were never beaten.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
}

pub fn accuracy(model: &Model, data: &[Encoded]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    for e in data {
        if model.predict(&e.ids)? == e.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn predictions(model: &Model, data: &[Encoded]) -> Result<Vec<usize>> {
    data.iter().map(|e| model.predict(&e.ids)).collect()
}

/// Mini-batch Adam over `train` with early stopping on validation accuracy.
///
/// The starting parameters count as epoch 0, so the model is never left worse
/// on validation than it began. On return the model holds the best
/// parameters seen. Adam state starts fresh on every call.
pub fn train_domain<R: Rng + ?Sized>(
    model: &mut Model,
    train: &[Encoded],
    valid: &[Encoded],
    config: &TrainConfig,
    freeze: Option<&FreezeMask>,
    ewc: Option<&EwcState>,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let ewc = ewc.filter(|e| e.lambda != 0.0);
    let score = |m: &Model| {
        if valid.is_empty() {
            Ok(0.0)
        } else {
            accuracy(m, valid)
        }
    };

    let mut adam = AdamState::new(config.adam, &model.params);
    let mut best_params: ParamStore = model.params.clone();
    let (mut best_acc, mut best_epoch) = (score(model)?, 0);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        if !valid.is_empty() && best_acc >= 1.0 {
            // nothing can beat a perfect score, so the result is already fixed
            break;
        }
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.params.zero_grad();
            for &i in batch {
                let (loss, grads) = model.example_gradients(&train[i].ids, train[i].label)?;
                loss_sum += loss;
                model.params.accumulate(&grads);
            }
            let inv = 1.0 / batch.len() as f64;
            for p in model.params.iter_mut() {
                p.grad.scale_assign(inv);
            }
            if let Some(e) = ewc {
                e.add_gradient(&mut model.params)?;
            }
            adam.step(&mut model.params, freeze)?;
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite("parameters after an epoch"));
        }
        let valid_accuracy = score(model)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            valid_accuracy,
        });
        if valid.is_empty() || valid_accuracy > best_acc {
            best_params.clone_from(&model.params);
            (best_acc, best_epoch) = (valid_accuracy, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let epochs_run = history.len();
    if best_epoch != epochs_run {
        model.params = best_params;
    }
    Ok(TrainOutcome {
        best_valid_accuracy: best_acc,
        best_epoch,
        epochs_run,
        history,
    })
}
