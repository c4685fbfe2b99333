//! Bag-of-codes logistic regression: per-patient code counts, no temporal structure.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{corpus, PatientRecord};
use crate::error::{IhanError, Result};
use crate::metrics::auc;
use crate::optim::{AdamWConfig, AdamWState};
use crate::seed;
use crate::tape::{bce_loss, sigmoid, Gradients, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;
use crate::train::{check_labels, prior_logit, EarlyStopping, History, Verdict};
use crate::vocab::{CodeType, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub active_types: Vec<CodeType>,
    pub learning_rate: f64,
    /// Coefficient of `½‖w‖²` added to the mean batch loss.
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub min_count: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            active_types: CodeType::ALL.to_vec(),
            learning_rate: 1e-2,
            l2: 1e-2,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub vocab: Vocabulary,
    pub active_types: Vec<CodeType>,
    pub store: ParamStore,
    weights: ParamId,
    bias: ParamId,
}

impl LogisticModel {
    /// Zero-initialised model over a combined vocabulary built from `train`.
    pub fn new(train: &[PatientRecord], types: &[CodeType], min_count: usize) -> Self {
        let vocab = Vocabulary::build_combined(corpus(train).filter(|(t, _)| types.contains(t)), min_count);
        let mut store = ParamStore::new();
        let weights = store.add("lr.w", Tensor::zeros(1, vocab.size()));
        let bias = store.add("lr.b", Tensor::scalar(0.0));
        LogisticModel {
            vocab,
            active_types: types.to_vec(),
            store,
            weights,
            bias,
        }
    }

    /// Code counts as a column vector; unseen codes land in the UNK slot.
    pub fn features(&self, patient: &PatientRecord) -> Tensor {
        let mut x = Tensor::zeros(self.vocab.size(), 1);
        for (t, code) in patient.codes().filter(|(t, _)| self.active_types.contains(t)) {
            let i = self.vocab.lookup(t, code);
            x.set(i, 0, x.get(i, 0) + 1.0);
        }
        x
    }

    pub fn logit_of(&self, x: &Tensor) -> f64 {
        self.store.get(self.weights).dot(x) + self.store.get(self.bias).item()
    }

    pub fn predict(&self, patient: &PatientRecord) -> f64 {
        sigmoid(self.logit_of(&self.features(patient)))
    }

    pub fn weights(&self) -> &Tensor {
        self.store.get(self.weights)
    }
}

pub fn evaluate_auc(model: &LogisticModel, set: &[PatientRecord]) -> Result<f64> {
    let scores: Vec<f64> = set.iter().map(|p| model.predict(p)).collect();
    let labels: Vec<u8> = set.iter().map(|p| p.label).collect();
    auc(&scores, &labels)
}

fn mean_loss(model: &LogisticModel, xs: &[Tensor], labels: &[u8]) -> f64 {
    xs.iter()
        .zip(labels)
        .map(|(x, &y)| bce_loss(sigmoid(model.logit_of(x)), f64::from(y)))
        .sum::<f64>()
        / xs.len().max(1) as f64
}

/// Trains the baseline with the same BCE/AdamW/early-stopping loop as IHAN.
pub fn train_logistic(
    config: &LogisticConfig,
    train_set: &[PatientRecord],
    valid_set: &[PatientRecord],
) -> Result<(LogisticModel, History)> {
    if config.batch_size == 0 || config.max_epochs == 0 || config.patience == 0 {
        return Err(IhanError::Config("batch size, max epochs and patience must be positive".into()));
    }
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(IhanError::Degenerate("empty training or validation set".into()));
    }
    check_labels(train_set, "training")?;
    let mut model = LogisticModel::new(train_set, &config.active_types, config.min_count);
    *model.store.get_mut(model.bias) = Tensor::scalar(prior_logit(train_set));
    let train_x: Vec<Tensor> = train_set
        .iter()
        .map(|p| model.features(p))
        .collect();
    let train_y: Vec<u8> = train_set.iter().map(|p| p.label).collect();
    let valid_x: Vec<Tensor> = valid_set
        .iter()
        .map(|p| model.features(p))
        .collect();
    let valid_y: Vec<u8> = valid_set.iter().map(|p| p.label).collect();

    let adamw = AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamWState::new(adamw, &model.store);
    let mut grads = Gradients::zeros_like(&model.store);
    let mut shuffle_rng = seed::stream(config.seed, seed::SHUFFLE);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut history = History {
        initial_valid_loss: mean_loss(&model, &valid_x, &valid_y),
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train_x.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.zero();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new(&model.store);
                let x = tape.input(train_x[i].clone());
                let w = tape.param(model.weights);
                let b = tape.param(model.bias);
                let z = tape.matmul(w, x)?;
                let z = tape.add(z, b)?;
                let y_hat = tape.sigmoid(z);
                let loss = tape.bce(y_hat, f64::from(train_y[i]))?;
                epoch_loss += tape.value(loss).item();
                tape.backward_into(loss, weight, &mut grads)?;
            }
            let w = model.store.get(model.weights);
            for (g, &wv) in grads.get_mut(model.weights).data_mut().iter_mut().zip(w.data()) {
                *g += config.l2 * wv;
            }
            opt.step(&mut model.store, &grads)?;
        }
        let valid = mean_loss(&model, &valid_x, &valid_y);
        history.train_loss.push(epoch_loss / train_x.len() as f64);
        history.valid_loss.push(valid);
        history.epochs_run = epoch;
        match stopper.observe(epoch, valid) {
            Verdict::Improved => best = model.clone(),
            Verdict::NoImprovement => {}
            Verdict::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Code, Encounter};

    fn patient(id: &str, label: u8, codes: &[&str]) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            label,
            encounters: vec![Encounter {
                date: "2020-01-01".parse().unwrap(),
                codes: codes.iter().map(|c| Code::new(CodeType::Diag, *c)).collect(),
            }],
        }
    }

    #[test]
    fn counts_and_unk() {
        let train = vec![patient("a", 1, &["X", "X", "Y"]), patient("b", 0, &["Y"])];
        let m = LogisticModel::new(&train, &CodeType::ALL, 1);
        let x = m.features(&patient("c", 0, &["X", "X", "Z"]));
        assert_eq!(x.data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn untrained_model_is_uninformative() {
        let train = vec![patient("a", 1, &["X"]), patient("b", 0, &["Y"])];
        let m = LogisticModel::new(&train, &CodeType::ALL, 1);
        assert_eq!(evaluate_auc(&m, &train).unwrap(), 0.5);
    }

    #[test]
    fn learns_separable_codes() {
        let mut set = Vec::new();
        for i in 0..40 {
            set.push(patient(&format!("p{i}"), 1, &["RISK", "BG"]));
            set.push(patient(&format!("n{i}"), 0, &["BG"]));
        }
        let config = LogisticConfig {
            learning_rate: 0.1,
            max_epochs: 30,
            ..LogisticConfig::default()
        };
        let (m, h) = train_logistic(&config, &set, &set).unwrap();
        assert_eq!(evaluate_auc(&m, &set).unwrap(), 1.0);
        assert!(h.best_valid_loss() < h.initial_valid_loss);
    }
}
