//! Mini-batch BCE/AdamW training with epoch-level early stopping on validation loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{IhanError, Result};
use crate::metrics::auc;
use crate::model::{IhanParams, Mode, ModelDims};
use crate::optim::{AdamWConfig, AdamWState};
use crate::seed;
use crate::tape::{bce_loss, sigmoid, Gradients, Tape};
use crate::vocab::CodeType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub active_types: Vec<CodeType>,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::AlgorithmComb,
            active_types: vec![CodeType::Diag, CodeType::Lab, CodeType::Rx, CodeType::Proc],
            embedding_dim: 128,
            hidden_dim: 128,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            clip_norm: Some(5.0),
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IhanError::Config(m.to_string()));
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rate must be positive and weight decay non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch size, max epochs and patience must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        self.resolved_mode().map(|_| ())
    }

    pub fn resolved_mode(&self) -> Result<Mode> {
        self.mode.resolve(&self.active_types)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// `mode:diag+lab` style label.
    pub fn label(&self) -> String {
        let mode = self.resolved_mode().unwrap_or(self.mode);
        let types: Vec<&str> = self.active_types.iter().map(|t| t.as_str()).collect();
        format!("{mode}:{}", types.join("+"))
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records the validation loss of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            Verdict::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                Verdict::Stop
            } else {
                Verdict::NoImprovement
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Validation loss of the freshly initialised model.
    pub initial_valid_loss: f64,
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best_valid_loss(&self) -> f64 {
        self.valid_loss[self.best_epoch - 1]
    }
}

pub(crate) fn check_labels(set: &[PatientRecord], what: &str) -> Result<()> {
    let pos = set.iter().filter(|p| p.label == 1).count();
    if pos == 0 || pos == set.len() {
        return Err(IhanError::DegenerateLabels(format!(
            "{what} set has {pos} positives out of {}",
            set.len()
        )));
    }
    Ok(())
}

/// Log-odds of the positive rate; the starting output bias.
pub fn prior_logit(set: &[PatientRecord]) -> f64 {
    let pos = set.iter().filter(|p| p.label == 1).count() as f64;
    (pos / (set.len() as f64 - pos)).ln()
}

/// Model probability, or `σ(b)` for a patient with no codes of the active types
/// (an empty member representation contributes nothing to the logit).
pub fn score(params: &IhanParams, patient: &PatientRecord) -> Result<f64> {
    match params.predict(patient) {
        Err(IhanError::Degenerate(_)) => Ok(sigmoid(params.head_bias())),
        other => other,
    }
}

pub fn scores(params: &IhanParams, set: &[PatientRecord]) -> Result<Vec<f64>> {
    set.iter().map(|p| score(params, p)).collect()
}

pub fn mean_loss(params: &IhanParams, set: &[PatientRecord]) -> Result<f64> {
    let mut total = 0.0;
    for p in set {
        total += bce_loss(score(params, p)?, f64::from(p.label));
    }
    Ok(total / set.len().max(1) as f64)
}

pub fn evaluate_auc(params: &IhanParams, set: &[PatientRecord]) -> Result<f64> {
    let s = scores(params, set)?;
    let labels: Vec<u8> = set.iter().map(|p| p.label).collect();
    auc(&s, &labels)
}

/// Trains an IHAN model and returns the parameters of the best validation epoch.
pub fn train(
    config: &TrainConfig,
    train_set: &[PatientRecord],
    valid_set: &[PatientRecord],
) -> Result<(IhanParams, History)> {
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(IhanError::Degenerate("empty training or validation set".into()));
    }
    check_labels(train_set, "training")?;
    let mut init_rng = seed::stream(config.seed, seed::INIT);
    let mut params = IhanParams::from_training_data(
        config.mode,
        &config.active_types,
        train_set,
        config.min_count,
        config.dims(),
        &mut init_rng,
    )?;
    params.set_head_bias(prior_logit(train_set));
    train_from(config, params, train_set, valid_set)
}

/// Continues training from given parameters (vocabularies already fixed).
pub fn train_from(
    config: &TrainConfig,
    mut params: IhanParams,
    train_set: &[PatientRecord],
    valid_set: &[PatientRecord],
) -> Result<(IhanParams, History)> {
    config.validate()?;
    let usable: Vec<&PatientRecord> = train_set
        .iter()
        .filter(|p| p.encounters.iter().any(|e| e.codes.iter().any(|c| config.active_types.contains(&c.code_type))))
        .collect();
    if usable.is_empty() {
        return Err(IhanError::Degenerate("no training patient has active-type codes".into()));
    }
    let mut shuffle_rng = seed::stream(config.seed, seed::SHUFFLE);
    let mut opt = AdamWState::new(config.adamw(), &params.store);
    let mut grads = Gradients::zeros_like(&params.store);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut history = History {
        initial_valid_loss: mean_loss(&params, valid_set)?,
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..usable.len()).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.zero();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new(&params.store);
                let loss = params.loss_on_tape(&mut tape, usable[i])?;
                epoch_loss += tape.value(loss).item();
                tape.backward_into(loss, weight, &mut grads)?;
            }
            if let Some(c) = config.clip_norm {
                grads.clip_global_norm(c);
            }
            opt.step(&mut params.store, &grads)?;
        }
        let valid = mean_loss(&params, valid_set)?;
        if !valid.is_finite() {
            return Err(IhanError::Evaluation(format!("validation loss {valid} at epoch {epoch}")));
        }
        history.train_loss.push(epoch_loss / usable.len() as f64);
        history.valid_loss.push(valid);
        history.epochs_run = epoch;
        log::debug!(
            "epoch {epoch}: train {:.5} valid {valid:.5} ({:.1}s)",
            epoch_loss / usable.len() as f64,
            started.elapsed().as_secs_f64()
        );
        match stopper.observe(epoch, valid) {
            Verdict::Improved => best = params.clone(),
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

    #[test]
    fn stops_after_patience_and_keeps_best() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 0.5), Verdict::Improved);
        assert_eq!(s.observe(2, 0.6), Verdict::Stop);
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut s = EarlyStopping::new(3);
        s.observe(1, 0.5);
        assert_eq!(s.observe(2, 0.5), Verdict::NoImprovement);
        assert_eq!(s.observe(3, 0.4), Verdict::Improved);
        assert_eq!(s.observe(4, 0.45), Verdict::NoImprovement);
        assert_eq!(s.observe(5, 0.41), Verdict::NoImprovement);
        assert_eq!(s.observe(6, 0.40), Verdict::Stop);
        assert_eq!(s.best_epoch(), 3);
        assert!(s.best_epoch() <= 6 - 3 + 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            mode: Mode::SingleType,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            mode: Mode::DataComb,
            active_types: vec![CodeType::Lab],
            ..Default::default()
        };
        assert_eq!(c.resolved_mode().unwrap(), Mode::SingleType);
        assert_eq!(c.label(), "single_type:lab");
    }
}
