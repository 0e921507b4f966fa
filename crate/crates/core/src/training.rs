//! Minibatch Adam training with per-epoch learning-rate halving, early
//! stopping on validation MSE, and a finite-difference gradient check.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::Model;
use crate::params::Parameterized;
use crate::rng::{substream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Supplied by the run configuration rather than the `[train]` table.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            patience: 6,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate of a 1-based epoch: halved after every epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / 2f64.powi(epoch.saturating_sub(1) as i32)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments over the flat real parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Early-stopping bookkeeping. Only a strict improvement resets the counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub counter: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            counter: 0,
        }
    }

    /// Records a validation score; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.counter = 0;
            true
        } else {
            self.counter += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.counter >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,lr\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_mse, r.val_mse, r.lr));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_csv().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place and leaves it holding the weights of the best
/// validation epoch.
///
/// Training loss is horizon MSE in instance-normalized space; validation MSE
/// is measured on denormalized forecasts. Window order is shuffled per epoch
/// and every random draw comes from a named substream of `cfg.seed`, so two
/// runs with equal inputs produce bit-identical weights.
pub fn fit(model: &mut Model, train: &WindowSet, val: &WindowSet, cfg: &TrainConfig) -> Result<History> {
    fit_with(model, train, val, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    model: &mut Model,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let spec = *model.spec();
    for (name, set) in [("training", train), ("validation", val)] {
        if set.lookback != spec.lookback || set.horizon != spec.horizon {
            return Err(Error::Compatibility(format!(
                "{name} windows are {}→{}, model is {}→{}",
                set.lookback, set.horizon, spec.lookback, spec.horizon
            )));
        }
    }
    if train.channels != val.channels {
        return Err(Error::Compatibility("training and validation channel counts differ".into()));
    }

    let mut params = model.flatten();
    let mut adam = Adam::new(params.len());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut shuffle_rng = substream(cfg.seed, "shuffle", &[epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<(&[f64], &[f64])> = chunk.iter().map(|&i| train.pair(i)).collect();
            let rngs: Vec<Rng> = (0..chunk.len())
                .map(|pos| substream(cfg.seed, "dropout", &[epoch as u64, step as u64, pos as u64]))
                .collect();
            let bg = model.batch_gradient(&windows, train.channels, true, rngs)?;
            if !bg.loss.is_finite() {
                return Err(Error::Invariant(format!("training loss diverged at epoch {epoch}")));
            }
            loss_sum += bg.loss * chunk.len() as f64;
            seen += chunk.len();
            adam.update(&mut params, &bg.grads, lr)?;
            model.load_flat(&params);
        }

        let val_mse = evaluate(model, val)?.mse;
        let record = EpochRecord {
            epoch,
            train_mse: loss_sum / seen as f64,
            val_mse,
            lr,
        };
        history.epochs.push(record);
        on_epoch(&record);
        if stopper.observe(epoch, val_mse) {
            best.clone_from(&params);
        }
        if stopper.should_stop() {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    model.load_flat(&best);
    history.best_epoch = stopper.best_epoch;
    history.best_val_mse = stopper.best;
    Ok(history)
}

/// Finite-difference agreement of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_RTOL: f64 = 1e-4;
pub const GRAD_CHECK_ATOL: f64 = 1e-7;

/// Compares analytic gradients against central differences for every
/// real scalar of every parameter tensor.
///
/// Runs in training mode so soft masks are exercised; each loss evaluation
/// reseeds the dropout generators, so the dropout pattern stays fixed
/// across perturbations.
pub fn grad_check(
    model: &Model,
    windows: &[(&[f64], &[f64])],
    channels: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let rngs = || -> Vec<Rng> {
        (0..windows.len())
            .map(|i| substream(seed, "gradcheck", &[i as u64]))
            .collect()
    };
    let analytic = model.batch_gradient(windows, channels, true, rngs())?.grads;
    let base = model.flatten();
    let mut probe = model.clone();
    let mut params = base.clone();
    let mut tensors = Vec::new();
    for entry in model.manifest() {
        let start = entry.offset / std::mem::size_of::<f64>();
        let end = start + entry.byte_len() / std::mem::size_of::<f64>();
        let mut check = TensorCheck {
            name: entry.name.clone(),
            len: end - start,
            max_rel_error: 0.0,
            failures: 0,
        };
        for i in start..end {
            params[i] = base[i] + GRAD_CHECK_STEP;
            probe.load_flat(&params);
            let up = probe.batch_loss(windows, channels, true, rngs())?;
            params[i] = base[i] - GRAD_CHECK_STEP;
            probe.load_flat(&params);
            let down = probe.batch_loss(windows, channels, true, rngs())?;
            params[i] = base[i];
            let fd = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[i];
            let scale = a.abs().max(fd.abs());
            let diff = (a - fd).abs();
            if diff > (GRAD_CHECK_RTOL * scale).max(GRAD_CHECK_ATOL) {
                check.failures += 1;
            }
            if scale > GRAD_CHECK_ATOL {
                check.max_rel_error = check.max_rel_error.max(diff / scale);
            }
        }
        tensors.push(check);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let failures = tensors.iter().map(|t| t.failures).sum();
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        failures,
    })
}
