//! Optimization loop: seeded shuffling, minibatch MSE on velocity targets,
//! Adam updates, reduce-on-plateau decay with a hard floor, and
//! best-by-validation checkpoint selection. Fixed seed means bit-identical
//! history and weights.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamState, PlateauScheduler};
use crate::repblock::ParamBinder;
use crate::tensor::{Element, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub max_epochs: usize,
    pub lr_floor: f64,
    pub plateau_factor: f64,
    /// Consecutive non-improving epochs before a decay.
    pub plateau_patience: usize,
    pub batch_size: usize,
    /// Sample stride between adjacent training windows.
    pub window_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            max_epochs: 100,
            lr_floor: 1e-6,
            plateau_factor: 0.1,
            plateau_patience: 10,
            batch_size: 128,
            window_stride: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_floor > 0.0 && self.lr_floor < self.initial_lr) {
            return Err(Error::invalid("TrainConfig", "need 0 < lr_floor < initial_lr"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid("TrainConfig", "plateau factor must be in (0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.window_stride == 0 {
            return Err(Error::invalid(
                "TrainConfig",
                "batch size, epoch cap, and window stride must be positive",
            ));
        }
        Ok(())
    }

    /// `key=value` override for the shared config-file schema. Returns false
    /// for keys that belong to other schemas.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::invalid("config", format!("bad {} `{}` for {}", what, value, key));
        match key {
            "initial_lr" => self.initial_lr = value.parse().map_err(|_| bad("float"))?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| bad("integer"))?,
            "lr_floor" => self.lr_floor = value.parse().map_err(|_| bad("float"))?,
            "plateau_factor" => self.plateau_factor = value.parse().map_err(|_| bad("float"))?,
            "plateau_patience" => self.plateau_patience = value.parse().map_err(|_| bad("integer"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "window_stride" => self.window_stride = value.parse().map_err(|_| bad("integer"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome<T: Element> {
    pub best: Model<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// One `epoch,train_loss,val_loss,lr` line per epoch, LF-terminated.
pub fn history_text(history: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    out
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_text(history))?;
    Ok(())
}

/// Mean MSE of the model over `windows`, running statistics, no gradients.
pub fn evaluate_loss<T: Element>(model: &Model<T>, windows: &[WindowSample<T>], batch: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("evaluate_loss", "empty window set"));
    }
    let mut total = 0.0f64;
    for chunk in windows.chunks(batch) {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let xs: Vec<Var> = chunk.iter().map(|w| tape.constant(w.imu.clone())).collect();
        let preds = model.forward_eval(&mut tape, &mut binder, &xs)?;
        for (pred, w) in preds.iter().zip(chunk) {
            let t = tape.constant(w.target.clone());
            let loss = tape.mse_loss(*pred, t)?;
            total += tape.value(loss).data()[0].as_f64();
        }
    }
    Ok(total / windows.len() as f64)
}

/// Trains in place, returning the best-validation snapshot and per-epoch
/// history. Stops at the epoch cap or when the next plateau decay would fall
/// below the learning-rate floor; no epoch ever runs below the floor.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train_set: &[WindowSample<T>],
    val_set: &[WindowSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train", "training and validation sets must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::<T>::new(cfg.initial_lr);
    let mut scheduler = PlateauScheduler::new(
        cfg.initial_lr,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.lr_floor,
    );
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let lr = scheduler.lr();
        adam.lr = lr;
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for batch_ids in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new();
            let xs: Vec<Var> = batch_ids
                .iter()
                .map(|&i| tape.constant(train_set[i].imu.clone()))
                .collect();
            let preds = model.forward_train(&mut tape, &mut binder, &xs)?;
            let losses: Vec<Var> = preds
                .iter()
                .zip(batch_ids)
                .map(|(&p, &i)| {
                    let t = tape.constant(train_set[i].target.clone());
                    tape.mse_loss(p, t)
                })
                .collect::<Result<_>>()?;
            let batch_loss = if losses.len() == 1 {
                losses[0]
            } else {
                let sum = tape.add_n(&losses)?;
                tape.scale(sum, T::one() / T::from_f64(losses.len() as f64))?
            };
            let loss_value = tape.value(batch_loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite batch loss at epoch {} (lr {})",
                    epoch, lr
                )));
            }
            epoch_loss += loss_value * batch_ids.len() as f64;

            tape.backward(batch_loss)?;
            model.store_grads(&tape, &binder)?;
            adam.begin_step();
            let mut idx = 0;
            let mut step_err = None;
            model.visit_params_mut(&mut |t| {
                if step_err.is_none() {
                    if let Err(e) = adam.update(idx, t) {
                        step_err = Some(e);
                    }
                    idx += 1;
                }
            });
            if let Some(e) = step_err {
                return Err(e);
            }
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = evaluate_loss(model, val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {}", epoch)));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
        }
        if !scheduler.observe(val_loss) {
            break;
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        history,
    })
}
