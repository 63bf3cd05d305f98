//! Losses, optimizers and the epoch loop with validation-based selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{argmax, DropoutPlan, LossStats, Model, Task};
use crate::numerics::HasParams;
use crate::preprocess::PatientSeq;

/// Floor applied inside every logarithm of a loss.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Negative log-likelihood of the realized combination.
pub fn loss_dcc(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(LOSS_FLOOR).ln()
}

/// Sum of the seven binary cross-entropies.
pub fn loss_dc(probs: &[f64], label: &[f64]) -> f64 {
    probs
        .iter()
        .zip(label)
        .map(|(&p, &y)| -(y * p.max(LOSS_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(LOSS_FLOOR).ln()))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr } => lr,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

/// Moment estimates of Adam, flat over all parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    opt: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(opt: Optimizer, n_params: usize) -> Self {
        Self {
            opt,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step<M: HasParams + ?Sized>(&mut self, model: &mut M) {
        self.t += 1;
        let mut k = 0;
        for p in model.params_mut() {
            let (values, grads) = (p.value.data_mut(), p.grad.data());
            match self.opt {
                Optimizer::Sgd { lr } => {
                    for (w, g) in values.iter_mut().zip(grads) {
                        *w -= lr * g;
                    }
                }
                Optimizer::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for (w, &g) in values.iter_mut().zip(grads) {
                        self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                        self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                        *w -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + eps);
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<M: HasParams + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let norm = model.params().iter().map(|p| p.grad.squared_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in model.params_mut() {
            p.grad.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub dropout: f64,
    pub seed: u64,
    /// Only 64-bit is supported.
    pub precision: u32,
    pub clip: Option<f64>,
    /// Stop after this many epochs without a validation-loss improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            optimizer: Optimizer::default(),
            dropout: crate::layers::DEFAULT_DROPOUT,
            seed: 0,
            precision: 64,
            clip: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.precision != 64 {
            return Err(Error::Config(format!(
                "precision {} not supported; only 64-bit floats are implemented",
                self.precision
            )));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation accuracy (combination task) or mean per-class bit
    /// accuracy at threshold 0.5 (class task).
    pub val_metric: f64,
    pub skipped: usize,
    pub wall_secs: f64,
}

impl PartialEq for EpochLog {
    /// Wall-clock time is excluded.
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.val_metric == other.val_metric
            && self.skipped == other.skipped
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based index of the selected epoch.
    pub best_epoch: usize,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| {
                let mut line = serde_json::to_string(e).expect("epoch log serializes");
                line.push('\n');
                line
            })
            .collect()
    }
}

/// Mean loss and metric of a model over every case of `patients`.
pub fn evaluate_loss(model: &Model, patients: &[PatientSeq]) -> Result<(f64, f64)> {
    let task = model.spec().task;
    let (mut loss, mut metric, mut n) = (0.0, 0.0, 0usize);
    for pat in patients {
        let idx: Vec<usize> = (0..pat.cases.len()).collect();
        let preds = model.predict_patient(pat, &idx, None)?;
        for (meta, pred) in pat.cases.iter().zip(preds) {
            let Some(p) = pred.probs() else { continue };
            match task {
                Task::Dcc => {
                    let Some(label) = meta.label_dcc else { continue };
                    loss += loss_dcc(p, label);
                    metric += f64::from(argmax(p) == label);
                }
                Task::Dc => {
                    let y = meta.label_dc.to_vec();
                    loss += loss_dc(p, &y);
                    metric += p.iter().zip(y).filter(|(p, y)| (**p >= 0.5) == (*y == 1.0)).count() as f64 / 7.0;
                }
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((loss / n as f64, metric / n as f64))
}

/// `(patient index, case index)` pairs of one epoch in shuffled order.
pub fn epoch_order(patients: &[PatientSeq], seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..patients.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    order.shuffle(&mut rng);
    order
        .into_iter()
        .flat_map(|p| (0..patients[p].cases.len()).map(move |c| (p, c)))
        .collect()
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize, patient: usize) -> u64 {
    let mut h = seed ^ 0x5851_F42D_4C95_7F2D;
    for v in [epoch as u64, batch as u64, patient as u64] {
        h = (h ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29);
    }
    h
}

/// Runs forward/backward over one batch and returns its loss totals. The
/// gradient left in the model is that of the batch mean loss.
pub fn batch_gradient(
    model: &mut Model,
    patients: &[PatientSeq],
    batch: &[(usize, usize)],
    plan_seed: Option<(f64, u64, usize, usize)>,
) -> Result<LossStats> {
    model.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut stats = LossStats::default();
    let mut i = 0;
    while i < batch.len() {
        let p = batch[i].0;
        let mut j = i;
        while j < batch.len() && batch[j].0 == p {
            j += 1;
        }
        let cases: Vec<usize> = batch[i..j].iter().map(|&(_, c)| c).collect();
        let plan = plan_seed.map(|(rate, seed, epoch, b)| DropoutPlan {
            rate,
            seed: dropout_seed(seed, epoch, b, p),
        });
        stats.add(model.accumulate_patient(&patients[p], &cases, scale, plan)?);
        i = j;
    }
    Ok(stats)
}

/// Result of [`train_model`]: the weights of the best validation epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

pub fn train_model(
    mut model: Model,
    train: &[PatientSeq],
    validation: &[PatientSeq],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !model.is_trainable() {
        return Ok(TrainOutcome {
            model,
            log: TrainLog::default(),
        });
    }
    if train.iter().all(|p| p.cases.is_empty()) {
        return Err(Error::Data("no training cases".into()));
    }
    let mut opt = OptimizerState::new(config.optimizer, model.param_count());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = epoch_order(train, config.seed, epoch);
        let mut total = LossStats::default();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let plan = (config.dropout > 0.0).then_some((config.dropout, config.seed, epoch, b));
            let stats = batch_gradient(&mut model, train, batch, plan)?;
            let batch_loss = stats.loss_sum / stats.cases.max(1) as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            if let Some(c) = config.clip {
                clip_grad_norm(&mut model, c);
            }
            opt.step(&mut model);
            total.add(stats);
        }
        if model.params().iter().any(|p| !p.value.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
                loss: f64::NAN,
            });
        }
        let train_loss = total.loss_sum / total.cases.max(1) as f64;
        let (val_loss, val_metric) = if validation.iter().any(|p| !p.cases.is_empty()) {
            evaluate_loss(&model, validation)?
        } else {
            (train_loss, f64::NAN)
        };
        log::info!("epoch {epoch}: train loss {train_loss:.4}, validation loss {val_loss:.4}, metric {val_metric:.4}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_metric,
            skipped: total.skipped,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        let better = match &best {
            None => true,
            Some((b, _)) => val_loss < *b || (b.is_nan() && !val_loss.is_nan()),
        };
        if better {
            best = Some((val_loss, model.clone()));
            log.best_epoch = epoch;
        } else if config.patience.is_some_and(|p| epoch - log.best_epoch >= p) {
            log::info!("no validation improvement since epoch {}; stopping", log.best_epoch);
            break;
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dcc_loss_examples() {
        let uniform = vec![1.0 / 85.0; 85];
        assert!((loss_dcc(&uniform, 3) - 85f64.ln()).abs() < 1e-12);
        assert!((loss_dcc(&uniform, 3) - 4.4427).abs() < 1e-4);
        assert_eq!(loss_dcc(&[0.0, 1.0], 1), 0.0);
        assert!((loss_dcc(&[0.7, 0.2, 0.1], 1) - 1.6094).abs() < 1e-4);
        assert!((loss_dcc(&[1.0, 0.0], 1) + (1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn dc_loss_examples() {
        let half = [0.5; 7];
        assert!((loss_dc(&half, &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]) - 4.8520).abs() < 1e-4);
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let p: Vec<f64> = y.iter().map(|&v| if v == 1.0 { 1.0 - 1e-12 } else { 1e-12 }).collect();
        assert!(loss_dc(&p, &y) < 1e-10);
        let p = [0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        let y = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let hand = -(0.9f64.ln()) * 7.0;
        assert!((loss_dc(&p, &y) - hand).abs() < 1e-4);
        assert!((-(0.9f64.ln()) - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig {
                epochs: 0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                optimizer: Optimizer::Sgd { lr: 0.0 },
                ..ok.clone()
            },
            TrainConfig {
                precision: 32,
                ..ok.clone()
            },
            TrainConfig {
                clip: Some(-1.0),
                ..ok.clone()
            },
            TrainConfig {
                patience: Some(0),
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        use crate::numerics::Parameter;
        struct One(Parameter);
        impl HasParams for One {
            fn params(&self) -> Vec<&Parameter> {
                vec![&self.0]
            }
            fn params_mut(&mut self) -> Vec<&mut Parameter> {
                vec![&mut self.0]
            }
        }
        let mut m = One(Parameter::zeros("w", 1, 2));
        m.0.grad.data_mut().copy_from_slice(&[3.0, -0.5]);
        let mut st = OptimizerState::new(Optimizer::adam(0.01), 2);
        st.step(&mut m);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((m.0.value.get(0, 0) + 0.01).abs() < 1e-9);
        assert!((m.0.value.get(0, 1) - 0.01).abs() < 1e-9);

        let mut m = One(Parameter::zeros("w", 1, 1));
        m.0.grad.data_mut()[0] = 2.0;
        let mut st = OptimizerState::new(Optimizer::Sgd { lr: 0.1 }, 1);
        st.step(&mut m);
        assert!((m.0.value.get(0, 0) + 0.2).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut m, 1.0), 2.0);
        assert!((m.0.grad.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_equality_ignores_wall_clock() {
        let a = EpochLog {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.6,
            val_metric: 0.7,
            skipped: 0,
            wall_secs: 1.0,
        };
        let b = EpochLog {
            wall_secs: 2.0,
            ..a.clone()
        };
        assert_eq!(a, b);
        let log = TrainLog {
            epochs: vec![a, b],
            best_epoch: 1,
        };
        assert_eq!(log.to_jsonl().lines().count(), 2);
    }
}
