//! Mini-batch training with AdamW, plateau scheduling and best-validation
//! checkpoint selection.
//!
//! Every random draw is derived from the root seed and its position
//! (epoch, batch, bag), so a run resumed from a checkpoint replays exactly
//! the trajectory of an uninterrupted one. Per-bag gradients are computed
//! in parallel over fixed chunks of the batch and summed in a fixed order,
//! which keeps results independent of the thread count.

mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, ReduceOnPlateau, ADAM_BETAS, ADAM_EPS};

use crate::bagging::Bag;
use crate::error::{bail, Error, Result};
use crate::model::{total_loss, Checkpoint, GeneLoss, Model, Pool};
use crate::numcore::{Tape, Tensor};
use crate::seeds::derive_seed_n;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Bags per parallel gradient chunk. Fixed so that the summation order does
/// not depend on the machine.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the gene term in the loss.
    pub gamma: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub gene_loss: GeneLoss,
    /// Global gradient-norm clipping; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            lr: 3e-4,
            weight_decay: 0.01,
            gamma: 0.5,
            plateau_patience: 2,
            plateau_factor: 10.0,
            seed: 0,
            gene_loss: GeneLoss::Mse,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Schedule for the synthetic benchmark: with 720 training bags an epoch
    /// is a dozen steps, so a larger rate and a longer plateau window.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            plateau_patience: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.plateau_patience == 0 {
            bail!(Config, "epochs, batch and plateau_patience must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.gamma < 0.0 {
            bail!(Config, "lr must be positive, weight_decay and gamma non-negative");
        }
        if !(self.plateau_factor > 1.0) {
            bail!(Config, "plateau_factor must exceed 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                bail!(Config, "clip_norm must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

/// Trainer bookkeeping stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Progress {
    epochs_done: usize,
    best_val_loss: Option<f64>,
    scheduler: ReduceOnPlateau,
    log: Vec<EpochMetrics>,
    train: TrainConfig,
}

/// Mean loss and bag-level accuracy of a model in eval mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(
    model: &Model<f32>,
    bags: &[Bag],
    gamma: f64,
    gene_loss: GeneLoss,
) -> Result<Evaluation> {
    if bags.is_empty() {
        bail!(Config, "evaluation set is empty");
    }
    let pool = Pool::Test(model.config.test_average);
    let per_bag: Vec<(f64, bool)> = bags
        .par_iter()
        .map(|bag| {
            let tape = Tape::new();
            let vars = model.store.bind(&tape);
            let out = model.forward(&vars, tape.constant(bag.instances.clone()), pool, None)?;
            let loss = total_loss(
                out.logits,
                bag.label as usize,
                out.genes,
                &bag.gene_target,
                gamma,
                gene_loss,
            )?;
            let logits = out.logits.value();
            let predicted = argmax(logits.data());
            Ok((loss.item() as f64, predicted == bag.label as usize))
        })
        .collect::<Result<_>>()?;
    let n = per_bag.len() as f64;
    Ok(Evaluation {
        loss: per_bag.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: per_bag.iter().filter(|p| p.1).count() as f64 / n,
    })
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss and parameter gradients of one bag in training mode.
fn bag_gradients(
    model: &Model<f32>,
    bag: &Bag,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    acc: &mut [Tensor<f32>],
) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.store.bind(&tape);
    let out = model.forward(
        &vars,
        tape.constant(bag.instances.clone()),
        Pool::TopN(n),
        Some(rng),
    )?;
    let loss = total_loss(
        out.logits,
        bag.label as usize,
        out.genes,
        &bag.gene_target,
        cfg.gamma,
        cfg.gene_loss,
    )?;
    let grads = tape.backward(loss)?;
    for (a, v) in acc.iter_mut().zip(&vars) {
        if let Some(g) = grads.get(*v) {
            a.add_assign(g);
        }
    }
    Ok(loss.item() as f64)
}

pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    scheduler: ReduceOnPlateau,
    epochs_done: usize,
    best_val_loss: Option<f64>,
    best: Option<Checkpoint>,
    log: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(&model.store, config.lr, config.weight_decay),
            scheduler: ReduceOnPlateau::new(config.plateau_patience, config.plateau_factor),
            model,
            config,
            epochs_done: 0,
            best_val_loss: None,
            best: None,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// epoch budget may be raised by passing a new `epochs`.
    pub fn resume(last: Checkpoint, best: Option<Checkpoint>, epochs: Option<usize>) -> Result<Self> {
        let progress: Progress = serde_json::from_value(last.meta.clone())
            .map_err(|e| Error::Input(format!("checkpoint has no trainer state: {e}")))?;
        let Some(state) = last.optimizer.clone() else {
            bail!(Input, "checkpoint has no optimizer state");
        };
        let mut config = progress.train;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        config.validate()?;
        Ok(Self {
            model: last.model()?,
            optimizer: AdamW::from_state(state, config.weight_decay),
            config,
            scheduler: progress.scheduler,
            epochs_done: progress.epochs_done,
            best_val_loss: progress.best_val_loss,
            best,
            log: progress.log,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.log
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_val_loss
    }

    /// Full trainer state, resumable with [`Trainer::resume`].
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.optimizer = Some(self.optimizer.state.clone());
        ck.meta = serde_json::to_value(Progress {
            epochs_done: self.epochs_done,
            best_val_loss: self.best_val_loss,
            scheduler: self.scheduler.clone(),
            log: self.log.clone(),
            train: self.config.clone(),
        })?;
        Ok(ck)
    }

    /// Trains one epoch and returns its mean training loss.
    fn train_epoch(&mut self, bags: &[Bag]) -> Result<f64> {
        let epoch = self.epochs_done as u64;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed_n(seed, "shuffle", &[epoch])));
        let n_set = self.model.config.n_set.clone();
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.config.batch).enumerate() {
            let b = b as u64;
            let mut pick = ChaCha8Rng::seed_from_u64(derive_seed_n(seed, "n", &[epoch, b]));
            let n = n_set[pick.random_range(0..n_set.len())];
            let model = &self.model;
            let cfg = &self.config;
            let zeros = || -> Vec<Tensor<f32>> {
                model
                    .store
                    .params()
                    .iter()
                    .map(|p| Tensor::zeros(p.value.shape()))
                    .collect()
            };
            let chunks: Vec<(f64, Vec<Tensor<f32>>)> = batch
                .chunks(CHUNK)
                .enumerate()
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|(c, idx)| {
                    let mut acc = zeros();
                    let mut loss = 0.0;
                    for (j, &i) in idx.iter().enumerate() {
                        let slot = (c * CHUNK + j) as u64;
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(
                            seed,
                            "dropout",
                            &[epoch, b, slot],
                        ));
                        loss += bag_gradients(model, &bags[i], n, cfg, &mut rng, &mut acc)?;
                    }
                    Ok((loss, acc))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            self.model.store.zero_grads();
            for (loss, acc) in chunks {
                total += loss;
                for (p, g) in self.model.store.params_mut().iter_mut().zip(&acc) {
                    p.grad.add_assign(g);
                }
            }
            for p in self.model.store.params_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            if let Some(max) = self.config.clip_norm {
                clip_global_norm(&mut self.model, max);
            }
            self.optimizer.step(&mut self.model.store)?;
        }
        Ok(total / bags.len() as f64)
    }

    /// One epoch of training followed by validation and scheduling. Returns
    /// whether validation loss improved on the best so far.
    pub fn epoch(&mut self, train: &[Bag], val: &[Bag]) -> Result<bool> {
        if train.is_empty() || val.is_empty() {
            bail!(Config, "training and validation sets must be non-empty");
        }
        let lr = self.optimizer.lr();
        let train_loss = self.train_epoch(train)?;
        let v = evaluate(&self.model, val, self.config.gamma, self.config.gene_loss)?;
        if !train_loss.is_finite() || !v.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {} losses: train {train_loss}, val {}",
                self.epochs_done + 1,
                v.loss
            )));
        }
        self.epochs_done += 1;
        self.log.push(EpochMetrics {
            epoch: self.epochs_done,
            train_loss,
            val_loss: v.loss,
            val_accuracy: v.accuracy,
            lr,
        });
        let improved = self.best_val_loss.is_none_or(|b| v.loss < b);
        if improved {
            self.best_val_loss = Some(v.loss);
            let mut ck = Checkpoint::from_model(&self.model);
            ck.meta = serde_json::json!({ "epoch": self.epochs_done, "val_loss": v.loss });
            self.best = Some(ck);
        }
        let next = self.scheduler.step(v.loss, lr);
        self.optimizer.set_lr(next);
        info!(
            "epoch {} train {:.4} val {:.4} acc {:.3} lr {:.1e}",
            self.epochs_done, train_loss, v.loss, v.accuracy, lr
        );
        Ok(improved)
    }

    /// Trains until the epoch budget is spent. With `out_dir`, writes
    /// `best.ckpt` on every improvement and `last.ckpt` plus `metrics.csv`
    /// after every epoch.
    pub fn run(&mut self, train: &[Bag], val: &[Bag], out_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epochs_done < self.config.epochs {
            let improved = self.epoch(train, val)?;
            if let Some(dir) = out_dir {
                if improved {
                    if let Some(best) = &self.best {
                        best.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                }
                self.checkpoint()?.save(&dir.join(LAST_CHECKPOINT))?;
                write_metrics(&dir.join(METRICS_FILE), &self.log)?;
            }
        }
        Ok(())
    }
}

fn clip_global_norm(model: &mut Model<f32>, max: f64) {
    let norm = model
        .store
        .params()
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        for p in model.store.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

pub fn write_metrics(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::io(path, e.into())))
        .collect()
}

/// Outcome of [`train`].
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochMetrics>,
}

/// Trains from scratch, or resumes when `out_dir` already holds a
/// `last.ckpt` and `resume` is set.
pub fn train(
    model: Model<f32>,
    train_set: &[Bag],
    val_set: &[Bag],
    config: TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    let last_path = out_dir.map(|d| d.join(LAST_CHECKPOINT));
    let mut trainer = match last_path.filter(|p| resume && p.exists()) {
        Some(p) => {
            let best_path: PathBuf = p.with_file_name(BEST_CHECKPOINT);
            let best = if best_path.exists() {
                Some(Checkpoint::load(&best_path)?)
            } else {
                None
            };
            info!("resuming from {}", p.display());
            Trainer::resume(Checkpoint::load(&p)?, best, Some(config.epochs))?
        }
        None => Trainer::new(model, config)?,
    };
    trainer.run(train_set, val_set, out_dir)?;
    let Some(best) = trainer.best.clone() else {
        bail!(Contract, "training finished without a validation result");
    };
    Ok(TrainOutcome {
        best,
        last: trainer.checkpoint()?,
        log: trainer.log.clone(),
    })
}
