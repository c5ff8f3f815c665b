//! Fine-tuning: cross-entropy, SGD with momentum and coupled L2 decay,
//! early stopping on validation loss and best-epoch checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{Checkpoint, Mode, Model, TrainingState};
use crate::data::{AugmentKey, ImageSet};
use crate::error::{Error, Result};
use crate::seeding::{mix, stream_rng, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Smallest drop in validation loss that counts as an improvement.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            max_epochs: 200,
            patience: 20,
            min_delta: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return bad(format!("min_delta must be finite and >= 0, got {}", self.min_delta));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be >= 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 decay folded into the gradient:
/// `d = g + λp`, `v = μv + d`, `p = p − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

const VELOCITY_PREFIX: &str = "momentum.";

impl Sgd {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Update every parameter in `params`; a parameter without a gradient is
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &[(&String, &Var)], grads: &GradStore) -> Result<()> {
        for &(name, var) in params {
            let p = var.as_tensor().detach();
            let mut d = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => p.zeros_like()?,
            };
            if self.weight_decay != 0.0 {
                d = (d + (&p * self.weight_decay)?)?;
            }
            let v = match self.velocity.get(name) {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + d)?,
                _ => d,
            };
            var.set(&(&p - (&v * self.learning_rate)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Momentum buffers keyed for a checkpoint.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        self.velocity
            .iter()
            .map(|(n, t)| Ok((format!("{VELOCITY_PREFIX}{n}"), t.copy()?)))
            .collect()
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) {
        self.velocity = state
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(VELOCITY_PREFIX).map(|k| (k.to_string(), t.clone())))
            .collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    NoImprovement,
    Stop,
}

/// Validation-loss tracker; epochs are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStopState {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            best_val_loss: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
            patience,
            min_delta,
        }
    }

    pub fn patience(&self) -> usize {
        self.patience
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Progress {
        let improved = val_loss.is_finite()
            && match self.best_val_loss {
                None => true,
                Some(best) => val_loss < best - self.min_delta,
            };
        if improved {
            self.best_val_loss = Some(val_loss);
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            return Progress::Improved;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            Progress::Stop
        } else {
            Progress::NoImprovement
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<EpochRecord>,
}

pub const TRAINING_LOG_HEADER: &str = "epoch,train_loss,val_loss,val_acc";

impl TrainingLog {
    /// Floats are written in shortest round-trip form, so equal logs have
    /// equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAINING_LOG_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_acc));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded visiting order for one epoch, cut into batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, mix(streams::SHUFFLE, epoch as u64)));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
}

fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::loss::cross_entropy(logits, targets)?)
}

/// One shuffled pass over `train`, one optimizer step per batch.
pub fn train_epoch(
    model: &Model,
    optimizer: &mut Sgd,
    train: &ImageSet,
    config: &TrainConfig,
    epoch: usize,
    augment: bool,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if model.is_frozen() {
        return Err(Error::Config("cannot train a frozen model".into()));
    }
    let params = model.trainable();
    let key = augment.then_some(AugmentKey { seed: config.seed, epoch });
    let mut total = 0.0;
    let batches = epoch_batches(train.len(), config.batch_size, config.seed, epoch);
    for (b, indices) in batches.iter().enumerate() {
        let x = train.batch(indices, key)?;
        let y = train.label_tensor(indices)?;
        let loss = cross_entropy(&model.forward_logits(&x, Mode::Train)?, &y)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: value,
                epoch,
                batch: b,
                indices: indices.clone(),
            });
        }
        total += value * indices.len() as f64;
        optimizer.step(&params, &loss.backward()?)?;
    }
    Ok(EpochStats {
        mean_loss: total / train.len() as f64,
        steps: batches.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValStats {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Mean cross-entropy and accuracy in eval mode, without augmentation.
pub fn validate(model: &Model, val: &ImageSet, batch_size: usize) -> Result<ValStats> {
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut total = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..val.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let logits = model.forward_logits(&val.batch(chunk, None)?, Mode::Eval)?;
        let y = val.label_tensor(chunk)?;
        let loss = cross_entropy(&logits, &y)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += loss * chunk.len() as f64;
        let pred = logits.argmax(1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(y.to_vec1::<u32>()?).filter(|(p, t)| **p == *t).count();
    }
    Ok(ValStats {
        loss: total / val.len() as f64,
        accuracy: correct as f64 / val.len() as f64,
        correct,
        total: val.len(),
    })
}

/// What [`run_epochs`] needs from a trainer.
pub(crate) trait EpochDriver {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord>;
    fn on_improvement(&mut self, state: &TrainingState) -> Result<()>;
}

/// The early-stopping loop, independent of what an epoch does.
pub(crate) fn run_epochs(config: &TrainConfig, driver: &mut impl EpochDriver) -> Result<(TrainingLog, EarlyStopState)> {
    let mut log = TrainingLog::default();
    let mut early = EarlyStopState::new(config.patience, config.min_delta);
    for epoch in 1..=config.max_epochs {
        let record = driver.run_epoch(epoch)?;
        log.rows.push(record);
        let progress = early.observe(epoch, record.val_loss);
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} val_acc {:.4}{}",
            record.train_loss,
            record.val_loss,
            record.val_acc,
            if progress == Progress::Improved { " *" } else { "" }
        );
        if progress == Progress::Improved {
            driver.on_improvement(&TrainingState {
                epoch,
                best_epoch: early.best_epoch,
                best_val_loss: early.best_val_loss,
                epochs_since_improvement: 0,
                seed: config.seed,
            })?;
        }
        if progress == Progress::Stop {
            log::info!("early stop after epoch {epoch}; best epoch {}", early.best_epoch);
            break;
        }
    }
    Ok((log, early))
}

struct Trainer<'a> {
    model: &'a Model,
    optimizer: Sgd,
    train: &'a ImageSet,
    val: &'a ImageSet,
    config: &'a TrainConfig,
    augment: bool,
    best: Option<Checkpoint>,
}

impl EpochDriver for Trainer<'_> {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let stats = train_epoch(self.model, &mut self.optimizer, self.train, self.config, epoch, self.augment)?;
        let val = validate(self.model, self.val, self.config.batch_size)?;
        Ok(EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            val_loss: val.loss,
            val_acc: val.accuracy,
        })
    }

    fn on_improvement(&mut self, state: &TrainingState) -> Result<()> {
        let checkpoint = Checkpoint::capture(self.model, self.optimizer.state()?, state.clone())?;
        self.best = Some(checkpoint.with_preprocess(self.train.config().clone()));
        Ok(())
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    /// State at the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub log: TrainingLog,
    pub early_stop: EarlyStopState,
    pub stopped_early: bool,
}

/// Train until early stopping or `max_epochs`, then load the best epoch's
/// parameters back into `model`.
pub fn fit(model: &Model, train: &ImageSet, val: &ImageSet, config: &TrainConfig, augment: bool) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut trainer = Trainer {
        model,
        optimizer: Sgd::new(config),
        train,
        val,
        config,
        augment,
        best: None,
    };
    let (log, early_stop) = run_epochs(config, &mut trainer)?;
    let best = trainer
        .best
        .ok_or_else(|| Error::Config("validation loss was never finite; no checkpoint to keep".into()))?;
    best.restore_into(model)?;
    Ok(FitOutcome {
        stopped_early: log.rows.len() < config.max_epochs,
        best,
        log,
        early_stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::data::{ClassLabel, GrayF32, PreprocessConfig};
    use candle_core::Device;
    use image::Luma;

    struct Scripted<F: Fn(usize) -> f64> {
        val_loss: F,
        improvements: Vec<usize>,
    }

    impl<F: Fn(usize) -> f64> EpochDriver for Scripted<F> {
        fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
            Ok(EpochRecord {
                epoch,
                train_loss: 0.0,
                val_loss: (self.val_loss)(epoch),
                val_acc: 0.0,
            })
        }
        fn on_improvement(&mut self, state: &TrainingState) -> Result<()> {
            self.improvements.push(state.epoch);
            Ok(())
        }
    }

    fn script(f: impl Fn(usize) -> f64) -> (TrainingLog, EarlyStopState, Vec<usize>) {
        let mut d = Scripted { val_loss: f, improvements: vec![] };
        let (log, es) = run_epochs(&TrainConfig::default(), &mut d).unwrap();
        (log, es, d.improvements)
    }

    #[test]
    fn constant_val_loss_stops_at_epoch_21() {
        let (log, es, imp) = script(|_| 0.7);
        assert_eq!(log.rows.len(), 21);
        assert_eq!(es.best_epoch, 1);
        assert_eq!(imp, vec![1]);
    }

    #[test]
    fn decreasing_val_loss_runs_to_max_epochs() {
        let (log, es, imp) = script(|e| 10.0 - e as f64 * 0.01);
        assert_eq!(log.rows.len(), 200);
        assert_eq!(es.best_epoch, 200);
        assert_eq!(imp.len(), 200);
    }

    #[test]
    fn patience_is_never_exceeded() {
        // Improves every 15th epoch, then plateaus at epoch 100.
        let (log, es, _) = script(|e| if e <= 100 { 5.0 - (e / 15) as f64 } else { 100.0 });
        assert!(es.epochs_since_improvement <= 20);
        assert_eq!(es.best_epoch, 90);
        assert_eq!(log.rows.len(), 110);
    }

    #[test]
    fn sub_threshold_drop_is_not_an_improvement() {
        let mut es = EarlyStopState::new(3, 1e-6);
        assert_eq!(es.observe(1, 1.0), Progress::Improved);
        assert_eq!(es.observe(2, 1.0 - 5e-7), Progress::NoImprovement);
        assert_eq!(es.observe(3, f64::NAN), Progress::NoImprovement);
        assert_eq!(es.observe(4, 0.5), Progress::Improved);
    }

    #[test]
    fn weight_decay_step_closed_form() {
        let cfg = TrainConfig::default();
        let p = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let name = "p".to_string();
        let mut sgd = Sgd::new(&cfg);
        let zero_grad = (p.as_tensor() * 0.0).unwrap().sum_all().unwrap().backward().unwrap();
        sgd.step(&[(&name, &p)], &zero_grad).unwrap();
        let v = p.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.9999995).abs() < 1e-15, "{v}");
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = TrainConfig { weight_decay: 0.0, learning_rate: 0.1, ..Default::default() };
        let p = Var::from_tensor(&Tensor::new(&[0.0f64], &Device::Cpu).unwrap()).unwrap();
        let name = "p".to_string();
        let mut sgd = Sgd::new(&cfg);
        for _ in 0..2 {
            let loss = p.as_tensor().sum_all().unwrap(); // gradient 1
            sgd.step(&[(&name, &p)], &loss.backward().unwrap()).unwrap();
        }
        // v1 = 1, v2 = 0.9 + 1
        let v = p.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((v + 0.1 * (1.0 + 1.9)).abs() < 1e-12);
        assert_eq!(sgd.state().unwrap().keys().collect::<Vec<_>>(), vec!["momentum.p"]);
    }

    #[test]
    fn batch_plan_arithmetic() {
        let plan = epoch_batches(310, 8, 3, 1);
        assert_eq!(plan.len(), 39);
        assert!(plan[..38].iter().all(|b| b.len() == 8));
        assert_eq!(plan[38].len(), 6);
        let mut seen: Vec<usize> = plan.concat();
        seen.sort();
        assert_eq!(seen, (0..310).collect::<Vec<_>>());
        assert_eq!(plan, epoch_batches(310, 8, 3, 1));
        assert_ne!(plan, epoch_batches(310, 8, 3, 2));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 201, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
    }

    fn tiny_set(n: usize, side: u32) -> ImageSet {
        let cfg = PreprocessConfig { target_side: side, ..Default::default() };
        let frames = (0..n)
            .map(|i| GrayF32::from_fn(side, side, |x, y| Luma([((x * (i as u32 + 1) + y) % 7) as f32 / 7.0])))
            .collect();
        let labels = (0..n).map(|i| ClassLabel::ALL[i % 4]).collect();
        let ids = (0..n).map(|i| format!("img{i}")).collect();
        ImageSet::from_frames(frames, labels, ids, &cfg).unwrap()
    }

    fn small_model(seed: u64) -> Model {
        Model::init(&ModelConfig { pretrained: false, use_cbam: false, ..Default::default() }, seed, DType::F32).unwrap()
    }

    fn params_of(m: &Model) -> Vec<Vec<f32>> {
        m.store().params().values().map(|v| crate::nn::to_vec(v.as_tensor()).unwrap()).collect()
    }

    #[test]
    fn epoch_counts_steps_and_zero_lr_keeps_params() {
        let set = tiny_set(10, 32);
        let model = small_model(0);
        let before = params_of(&model);
        let cfg = TrainConfig { learning_rate: 0.0, ..Default::default() };
        let stats = train_epoch(&model, &mut Sgd::new(&cfg), &set, &cfg, 1, true).unwrap();
        assert_eq!(stats.steps, 2);
        assert!(stats.mean_loss.is_finite());
        assert_eq!(params_of(&model), before);
    }

    #[test]
    fn zeroed_classifier_gives_uniform_loss() {
        let model = small_model(1);
        for (name, v) in model.store().params() {
            if name.starts_with("classifier.") {
                v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let stats = validate(&model, &tiny_set(6, 32), 4).unwrap();
        assert!((stats.loss - 4f64.ln()).abs() < 1e-6, "{}", stats.loss);
    }

    #[test]
    fn frozen_model_does_not_move() {
        let mut model = small_model(2);
        model.freeze();
        let set = tiny_set(4, 32);
        let before = params_of(&model);
        let cfg = TrainConfig::default();
        assert!(train_epoch(&model, &mut Sgd::new(&cfg), &set, &cfg, 1, false).is_err());
        // A manual step with whatever the model offers as trainable.
        let loss = cross_entropy(
            &model.forward_logits(&set.batch(&[0, 1], None).unwrap(), Mode::Train).unwrap(),
            &set.label_tensor(&[0, 1]).unwrap(),
        )
        .unwrap();
        Sgd::new(&cfg).step(&model.trainable(), &loss.backward().unwrap()).unwrap();
        assert_eq!(params_of(&model), before);
    }
}
