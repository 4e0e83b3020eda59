//! Minibatch SGD on cross-entropy with a fixed step-decay schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, TrainingReport};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Every `validation_every`-th sample is held out for validation.
    pub validation_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            batch_size: 16,
            momentum: 0.9,
            validation_every: 5,
            seed: 0,
        }
    }
}

/// Fraction of `data` whose argmax prediction equals the label.
pub fn accuracy(model: &Model, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .images
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| model.forward_unchecked(x.data()).label() == y)
        .count();
    hits as f64 / data.len() as f64
}

/// Learning rate for `epoch`: halved at 50% and again at 75% of training.
fn scheduled_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = cfg.lr;
    if 2 * epoch >= cfg.epochs {
        lr *= 0.5;
    }
    if 4 * epoch >= 3 * cfg.epochs {
        lr *= 0.5;
    }
    lr
}

pub fn train(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= spec.num_classes()) {
        return Err(Error::Index {
            index: bad,
            len: spec.num_classes(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut model = Model::init(spec.clone(), cfg.seed)?;
    let (train_set, val_set) = data.split_every(cfg.validation_every);
    for x in &train_set.images {
        model.check_input(x)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_5e_d5);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let n_params = model.param_count();
    let mut velocity = vec![0.0f64; n_params];
    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0f64; n_params];
            for &i in batch {
                let tr = model.trace(train_set.images[i].data().to_vec());
                let probs = numerics::softmax(&tr.logits);
                let y = train_set.labels[i];
                epoch_loss += numerics::cross_entropy(&probs, y)?;
                let seed = numerics::cross_entropy_logit_grad(&probs, y);
                model.backward(&tr, Some(seed), None, Some(&mut grad));
            }
            let k = 1.0 / batch.len() as f64;
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = cfg.momentum * *v + g * k;
            }
            model.update_params(|i, p| (p as f64 - lr * velocity[i]) as f32);
            if !epoch_loss.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Training { epoch });
            }
        }
        log::debug!(
            "{} epoch {epoch}: mean loss {:.4}",
            spec.name(),
            epoch_loss / train_set.len().max(1) as f64
        );
    }
    model.report = Some(TrainingReport {
        epochs: cfg.epochs,
        train_accuracy: accuracy(&model, &train_set),
        validation_accuracy: accuracy(&model, &val_set),
    });
    Ok(model)
}
