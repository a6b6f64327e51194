use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::forward::{active_slots, backward, forward_subset};
use super::params::{ModelConfig, ModelParams};
use crate::data::{CellState, Cohort, LabSchema, MaskPlan};
use crate::error::{Error, Result};
use crate::eval;
use crate::math::{AdamWConfig, LrSchedule, OptimState};
use crate::rng::{derive_seed, rng_from_seed};

/// Base learning rate for a batch of 256; scaled linearly with batch size.
pub const BASE_LR_PER_256: f64 = 1.5e-3;

/// Rows per gradient work unit. Fixed so the reduction order, and hence the
/// result, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

const STREAM_SPLIT: u64 = 0x5711;
const STREAM_SHUFFLE: u64 = 0x5448;
const STREAM_MASK: u64 = 0x4d41;
const STREAM_DROPOUT: u64 = 0x4452;
const STREAM_VAL: u64 = 0x5641;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Validate every this many epochs; 0 disables.
    pub validate_every: usize,
    /// Fraction of the training rows held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(256, 500)
    }
}

impl TrainConfig {
    /// Defaults with the base learning rate scaled to `batch_size`.
    pub fn new(batch_size: usize, epochs: usize) -> Self {
        Self {
            batch_size,
            epochs,
            schedule: LrSchedule {
                base_lr: BASE_LR_PER_256 * batch_size as f64 / 256.0,
                min_lr: 0.0,
                warmup_epochs: 20.min(epochs.saturating_sub(1)),
                total_epochs: epochs,
            },
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            checkpoint_every: 0,
            validate_every: 30,
            val_fraction: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.epochs > 0 {
            self.schedule.validate()?;
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Validation metrics, normalized scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    /// Masked-loss over every non-missing validation cell.
    pub loss: f64,
    /// Metrics over masked value cells only.
    pub rmse: f64,
    pub r2: Option<f64>,
    pub mae: f64,
    pub wasserstein: f64,
    pub n_masked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val: Option<ValMetrics>,
}

/// Mutable training state: parameters, optimizer moments and the epoch
/// counter. Checkpoints serialize exactly this.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optim: OptimState,
    /// Next epoch to run.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    /// Fitted schema of the training data, carried into checkpoints.
    pub schema: Option<LabSchema>,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&model, config.seed)?;
        let optim = OptimState::new(&params.shapes(), params.decay_mask(), config.adamw());
        Ok(Self {
            model,
            config,
            params,
            optim,
            epoch: 0,
            log: Vec::new(),
            schema: None,
        })
    }

    /// Trains until `config.epochs`, resuming from `self.epoch`.
    pub fn run(&mut self, cohort: &Cohort, checkpoint_dir: Option<&Path>) -> Result<()> {
        self.run_until(cohort, self.config.epochs, checkpoint_dir)
    }

    /// Trains epochs `self.epoch..stop` (capped at `config.epochs`).
    pub fn run_until(&mut self, cohort: &Cohort, stop: usize, checkpoint_dir: Option<&Path>) -> Result<()> {
        if cohort.schema.seq_len() != self.model.seq_len {
            return Err(Error::dim(format!(
                "cohort has {} slots, model expects {}",
                cohort.schema.seq_len(),
                self.model.seq_len
            )));
        }
        if self.schema.is_none() && cohort.schema.is_fitted() {
            self.schema = Some(cohort.schema.clone());
        }
        let (train_idx, val_idx) = split_indices(cohort.len(), self.config.val_fraction, self.config.seed);
        if train_idx.is_empty() && self.epoch < stop.min(self.config.epochs) {
            return Err(Error::InsufficientData("no training rows".into()));
        }
        let stop = stop.min(self.config.epochs);
        while self.epoch < stop {
            let e = self.epoch;
            let lr = self.config.schedule.lr_at(e);
            let loss = self.train_epoch(cohort, &train_idx, e, lr)?;
            let val = if self.config.validate_every > 0 && (e + 1) % self.config.validate_every == 0 && !val_idx.is_empty()
            {
                Some(self.validate(cohort, &val_idx)?)
            } else {
                None
            };
            self.log.push(EpochLog { epoch: e, lr, loss, val });
            self.epoch += 1;
            if let Some(dir) = checkpoint_dir {
                if self.config.checkpoint_every > 0 && self.epoch % self.config.checkpoint_every == 0 {
                    save_checkpoint(self, &checkpoint_path(dir, self.epoch))?;
                }
            }
        }
        Ok(())
    }

    fn train_epoch(&mut self, cohort: &Cohort, train_idx: &[usize], epoch: usize, lr: f64) -> Result<f64> {
        let seed = self.config.seed;
        let mut order = train_idx.to_vec();
        order.shuffle(&mut rng_from_seed(derive_seed(derive_seed(seed, STREAM_SHUFFLE), epoch as u64)));
        let mask_seed = derive_seed(derive_seed(seed, STREAM_MASK), epoch as u64);
        let drop_seed = derive_seed(derive_seed(seed, STREAM_DROPOUT), epoch as u64);
        let mut total_sq = 0.0;
        let mut total_n = 0usize;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let plans: Vec<MaskPlan> = batch
                .iter()
                .map(|&i| {
                    MaskPlan::draw(
                        &cohort.rows[i],
                        self.model.mask_ratio,
                        derive_seed(mask_seed, i as u64),
                        self.model.mask_times,
                    )
                })
                .collect();
            let drop: Vec<u64> = batch.iter().map(|&i| derive_seed(drop_seed, i as u64)).collect();
            let (sq, n, grads) = batch_gradient(&self.params, &self.model, cohort, batch, &plans, &drop)?;
            if n == 0 {
                continue;
            }
            let loss = sq / n as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    what: format!("loss {loss}"),
                });
            }
            let g = grads.tensors();
            let mut p = self.params.tensors_mut();
            self.optim.step(&mut p, &g, lr).map_err(|e| match e {
                Error::NonFiniteGradient { tensor } => Error::Divergence {
                    epoch,
                    batch: b,
                    what: format!("non-finite gradient in tensor {tensor}"),
                },
                other => other,
            })?;
            total_sq += sq;
            total_n += n;
        }
        Ok(if total_n == 0 { 0.0 } else { total_sq / total_n as f64 })
    }

    fn validate(&self, cohort: &Cohort, val_idx: &[usize]) -> Result<ValMetrics> {
        let ratio = if self.model.mask_ratio > 0.0 { self.model.mask_ratio } else { 0.25 };
        let vseed = derive_seed(self.config.seed, STREAM_VAL);
        let results: Vec<Result<(f64, usize, Vec<(f64, f64)>)>> = val_idx
            .par_iter()
            .map(|&i| {
                let row = &cohort.rows[i];
                let plan = MaskPlan::draw(row, ratio, derive_seed(vseed, i as u64), self.model.mask_times);
                let subset = active_slots(&plan, &[]);
                if subset.is_empty() {
                    return Ok((0.0, 0, Vec::new()));
                }
                let tr = forward_subset(row, &plan, &self.params, &self.model, &subset, None)?;
                let mut sq = 0.0;
                let mut pairs = Vec::new();
                for (k, &s) in subset.iter().enumerate() {
                    let t = row.cell(s).unwrap_or(0.0);
                    sq += (tr.preds[k] - t) * (tr.preds[k] - t);
                    if plan.cells[s] == CellState::Masked && LabSchema::slot_kind(s).is_value() {
                        pairs.push((t, tr.preds[k]));
                    }
                }
                Ok((sq, subset.len(), pairs))
            })
            .collect();
        let mut sq = 0.0;
        let mut n = 0;
        let (mut y, mut y_hat) = (Vec::new(), Vec::new());
        for r in results {
            let (s, c, p) = r?;
            sq += s;
            n += c;
            for (a, b) in p {
                y.push(a);
                y_hat.push(b);
            }
        }
        let loss = if n == 0 { 0.0 } else { sq / n as f64 };
        if y.is_empty() {
            return Ok(ValMetrics {
                loss,
                rmse: 0.0,
                r2: None,
                mae: 0.0,
                wasserstein: 0.0,
                n_masked: 0,
            });
        }
        Ok(ValMetrics {
            loss,
            rmse: eval::rmse(&y, &y_hat)?,
            r2: eval::r2(&y, &y_hat).ok(),
            mae: eval::mae(&y, &y_hat)?,
            wasserstein: eval::wasserstein1(&y, &y_hat)?,
            n_masked: y.len(),
        })
    }
}

/// `dir/ckpt_0030.lmae`
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_{epoch:04}.lmae"))
}

/// Seeded split of `0..n` into (train, validation) index lists, each sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, STREAM_SPLIT)));
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Sum of squared errors, contributing-cell count and the gradient of the
/// batch loss `Σ sq / n` over every non-missing cell in the batch.
pub fn batch_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    cohort: &Cohort,
    rows: &[usize],
    plans: &[MaskPlan],
    dropout_seeds: &[u64],
) -> Result<(f64, usize, ModelParams)> {
    let n: usize = plans.iter().map(|p| p.len() - p.count(CellState::Missing)).sum();
    let mut total = params.zeros_like();
    if n == 0 {
        return Ok((0.0, 0, total));
    }
    let inv = 2.0 / n as f64;
    let items: Vec<usize> = (0..rows.len()).collect();
    let partials: Vec<Result<(f64, ModelParams)>> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut sq = 0.0;
            for &k in chunk {
                let row = &cohort.rows[rows[k]];
                let plan = &plans[k];
                let subset = active_slots(plan, &[]);
                if subset.is_empty() {
                    continue;
                }
                let mut rng = rng_from_seed(dropout_seeds[k]);
                let tr = forward_subset(row, plan, params, cfg, &subset, Some(&mut rng))?;
                let mut d = Vec::with_capacity(subset.len());
                for (i, &s) in subset.iter().enumerate() {
                    let t = row.cell(s).unwrap_or(0.0);
                    let e = tr.preds[i] - t;
                    sq += e * e;
                    d.push(inv * e);
                }
                backward(&tr, row, plan, params, cfg, &d, &mut g);
            }
            Ok((sq, g))
        })
        .collect();
    let mut sq = 0.0;
    for p in partials {
        let (s, g) = p?;
        sq += s;
        total.add_assign(&g);
    }
    Ok((sq, n, total))
}

/// Trains from scratch; returns the final parameters and the epoch log.
pub fn train(cohort: &Cohort, model: &ModelConfig, config: &TrainConfig) -> Result<(ModelParams, Vec<EpochLog>)> {
    let mut model = model.clone();
    if model.seq_len == 0 {
        model.seq_len = cohort.schema.seq_len();
    }
    let mut t = Trainer::new(model, config.clone())?;
    t.run(cohort, None)?;
    Ok((t.params, t.log))
}
