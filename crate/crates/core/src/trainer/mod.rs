//! Seeded mini-batch training with Adam, per-epoch validation and
//! checkpointing.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertCounter;
use crate::metrics::{self, EvalReport, RoutingMode};
use crate::model::{forward_sample, scene_tensors, total_loss, Model, ModelConfig};
use crate::numerics::{Graph, ParamStore};
use crate::shape_encoder::draw_eta;
use crate::synth_data::{sample_seed, Dataset, SceneRecord};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub balance_weight: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            balance_weight: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.balance_weight >= 0.0 && self.balance_weight.is_finite()) {
            return Err(Error::config("balance weight must be finite and non-negative"));
        }
        let lr = self.optimizer.lr;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        // With k = 1 and one sample, the gate is a constant one-hot vector and
        // the balance term has no gradient.
        if self.balance_weight > 0.0 && self.model.topk == 1 && self.model.experts > 1 && self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2 when balancing a top-1 router"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub step: u64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_cv2: f64,
    pub val_miou_full: Option<f64>,
    pub val_miou_occ: Option<f64>,
    pub val_utilization: Vec<f64>,
    pub val_entropy: Option<f64>,
    /// Expert forward evaluations during the epoch's training steps.
    pub expert_evaluations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub ce: f64,
    pub cv2: f64,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4e4f_4953;

/// Training state: model, optimizer, noise RNG and counters.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u32,
    pub counter: ExpertCounter,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), config.seed)?;
        let adam = Adam::new(config.optimizer, &model.store);
        let rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, NOISE_STREAM));
        let counter = ExpertCounter::new(config.model.experts);
        Ok(Self {
            config,
            model,
            adam,
            rng,
            step: 0,
            epoch: 0,
            counter,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let counter = ExpertCounter::new(ckpt.config.model.experts);
        Ok(Self {
            rng: ckpt.rng.restore(),
            config: ckpt.config,
            model: ckpt.model,
            adam: ckpt.adam,
            step: ckpt.step,
            epoch: ckpt.epoch,
            counter,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Sample order for `epoch` (1-based): a seeded Fisher-Yates shuffle.
    pub fn epoch_order(&self, epoch: u32, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&SceneRecord]) -> Result<StepStats> {
        let step = self.step + 1;
        let d = self.config.model.latent_dim;
        let etas: Vec<Vec<f32>> = batch.iter().map(|_| draw_eta(d, &mut self.rng)).collect();
        let (stats, grads) = {
            let mut g = Graph::new(&self.model.store);
            let pass = (|| {
                let mut logits = Vec::with_capacity(batch.len());
                let mut gates = Vec::with_capacity(batch.len());
                for (r, eta) in batch.iter().zip(&etas) {
                    let (input, visible) = scene_tensors::<f32>(r, self.config.model.side)?;
                    let out = forward_sample(
                        &mut g,
                        &self.config.model,
                        &self.model.params,
                        input,
                        visible,
                        Some(eta),
                        Some(&self.counter),
                    )?;
                    logits.push(out.logits);
                    gates.push(out.route.gate);
                }
                let targets: Vec<_> = batch.iter().map(|r| &r.amodal).collect();
                let loss = total_loss(&mut g, &logits, &targets, &gates, self.config.balance_weight)?;
                let grads = g.backward(loss.total)?;
                let stats = StepStats {
                    loss: g.value(loss.total).item() as f64,
                    ce: g.value(loss.ce).item() as f64,
                    cv2: g.value(loss.cv2).item() as f64,
                };
                Ok((stats, grads))
            })();
            pass.map_err(|e| self.divergence(step, e))?
        };
        if let Some(id) = self
            .model
            .store
            .ids()
            .find(|&id| grads.get(id).is_some_and(|t| !t.is_finite()))
        {
            return Err(Error::Diverged {
                step,
                block: block_name(self.model.store.name(id)),
            });
        }
        self.adam.step(&mut self.model.store, &grads);
        if let Some(id) = self.model.store.ids().find(|&id| !self.model.store.get(id).is_finite()) {
            return Err(Error::Diverged {
                step,
                block: block_name(self.model.store.name(id)),
            });
        }
        self.step = step;
        Ok(stats)
    }

    /// Maps a numeric failure to [`Error::Diverged`], naming the parameter
    /// block most likely responsible.
    fn divergence(&self, step: u64, err: Error) -> Error {
        match err {
            Error::NonFinite { .. } | Error::DegenerateDistribution => Error::Diverged {
                step,
                block: culprit(&self.model.store),
            },
            other => other,
        }
    }

    /// Trains one epoch and evaluates on `val`.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let side = self.config.model.side;
        for d in [train, val] {
            if !d.is_empty() && (d.height != side || d.width != side) {
                return Err(Error::ConfigMismatch(format!(
                    "dataset is {}×{}, model expects {side}×{side}",
                    d.height, d.width
                )));
            }
        }
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch, train.len());
        self.counter.reset();
        let (mut loss, mut ce, mut cv2, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&SceneRecord> = chunk.iter().map(|&i| &train.records[i]).collect();
            let s = self.train_step(&batch)?;
            loss += s.loss;
            ce += s.ce;
            cv2 += s.cv2;
            batches += 1;
        }
        self.epoch = epoch;
        let b = batches as f64;
        let report: Option<EvalReport> = if val.is_empty() {
            None
        } else {
            Some(metrics::evaluate(&self.model, val, RoutingMode::Mean)?)
        };
        Ok(EpochLog {
            epoch,
            step: self.step,
            train_loss: loss / b,
            train_ce: ce / b,
            train_cv2: cv2 / b,
            val_miou_full: report.as_ref().map(|r| r.miou_full),
            val_miou_occ: report.as_ref().and_then(|r| r.miou_occ),
            val_utilization: report.as_ref().map(|r| r.utilization.clone()).unwrap_or_default(),
            val_entropy: report.as_ref().map(|r| r.utilization_entropy_normalized),
            expert_evaluations: self.counter.total(),
        })
    }

    /// Runs epochs until `config.epochs`, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(train, val)?;
            on_epoch(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// `trunk.enc1.weight` → `trunk.enc1`.
fn block_name(param: &str) -> String {
    param
        .rsplit_once('.')
        .map_or(param, |(block, _)| block)
        .to_string()
}

/// First non-finite block, else the block holding the largest magnitude.
fn culprit(store: &ParamStore<f32>) -> String {
    if let Some(id) = store.ids().find(|&id| !store.get(id).is_finite()) {
        return block_name(store.name(id));
    }
    let mut best = ("unknown", 0.0f32);
    for (name, t) in store.iter() {
        let m = t.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if m > best.1 {
            best = (name, m);
        }
    }
    block_name(best.0)
}

/// Final checkpoint and per-epoch log of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub fn train(config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone())?;
    let log = t.run(train, val, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        log,
    })
}

/// Continues a checkpointed run up to `epochs` total epochs.
pub fn resume(ckpt: Checkpoint, epochs: u32, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    let mut t = Trainer::from_checkpoint(ckpt)?;
    t.config.epochs = epochs;
    let log = t.run(train, val, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        log,
    })
}

#[cfg(test)]
mod tests;
