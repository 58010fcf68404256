//! Curriculum training loop with per-epoch metrics and LSM snapshots.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Network};
use crate::sharing::{recurrence_regularized_loss, CoefficientInit, ConvStrategy, LayerSimilarityMatrix};
use crate::task::{batch_tensors, Confusion, CurriculumSpec, GridExample};
use crate::tensor::Tensor;

use super::checkpoint::{load_network_tensors, network_tensors, Checkpoint};
use super::optim::{Optimizer, OptimizerConfig};
use super::schedule::Schedule;

pub const METRICS_HEADER: &str = "phase,epoch,train_loss,val_f1,lr,lsm_offdiag_mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub curriculum: CurriculumSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub lambda_r: f64,
    /// Seeds the per-epoch shuffles.
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    32
}

fn default_val_fraction() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn new(curriculum: CurriculumSpec, optimizer: OptimizerConfig, lambda_r: f64, seed: u64) -> Self {
        Self {
            curriculum,
            batch_size: default_batch(),
            val_fraction: default_val_fraction(),
            optimizer,
            schedule: Schedule::Fixed,
            lambda_r,
            seed,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.optimizer.violations();
        v.extend(self.schedule.violations());
        let c = &self.curriculum;
        if !(1..=5).contains(&c.phases) {
            v.push(format!("curriculum.phases must be in 1..=5, got {}", c.phases));
        }
        if c.examples_per_phase < 2 {
            v.push(format!(
                "curriculum.examples_per_phase must be at least 2, got {}",
                c.examples_per_phase
            ));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            v.push(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            v.push(format!("lambda_r must be non-negative, got {}", self.lambda_r));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Number of held-out examples among `n`; at least one is kept on each side.
    pub fn val_count(&self, n: usize) -> usize {
        ((n as f64 * self.val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: usize,
    /// Global epoch counter; 0 is the state before any update.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub lr: f64,
    /// Mean off-diagonal LSM entry over all sharing groups.
    pub lsm_offdiag_mean: Option<f64>,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let lsm = r.lsm_offdiag_mean.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.phase, r.epoch, r.train_loss, r.val_f1, r.lr, lsm
        );
    }
    out
}

/// Where a run stands: `phase` (1-based) and epochs already completed in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub phase: usize,
    pub epoch_in_phase: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    spec: ArchitectureSpec,
    strategy: ConvStrategy,
    config: TrainConfig,
    position: Position,
    optimizer_steps: u64,
    history: Vec<EpochMetrics>,
}

pub struct Trainer {
    pub net: Network,
    pub opt: Optimizer,
    pub config: TrainConfig,
    pub position: Position,
    pub history: Vec<EpochMetrics>,
    /// `(global epoch, LSM)` per sharing group, recorded after every epoch.
    pub lsm_snapshots: Vec<(usize, LayerSimilarityMatrix)>,
}

/// Per-step hook; returning `false` stops training after that epoch.
pub type EpochHook<'a> = dyn FnMut(&Trainer, &EpochMetrics) -> Result<bool> + 'a;

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Optimizer::new(config.optimizer.clone())?;
        Ok(Self {
            net,
            opt,
            config,
            position: Position {
                phase: 1,
                epoch_in_phase: 0,
            },
            history: Vec::new(),
            lsm_snapshots: Vec::new(),
        })
    }

    pub fn global_epoch(&self) -> usize {
        (self.position.phase - 1) * self.config.curriculum.epochs_per_phase
            + self.position.epoch_in_phase
    }

    pub fn is_finished(&self) -> bool {
        self.position.phase > self.config.curriculum.phases
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.history)
    }

    fn lsm_mean(&self) -> Result<Option<f64>> {
        let groups = self.net.groups();
        if groups.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for g in groups {
            total += g.lsm()?.offdiag_mean();
        }
        Ok(Some(total / groups.len() as f64))
    }

    fn snapshot(&mut self, epoch: usize) -> Result<()> {
        for g in self.net.groups() {
            self.lsm_snapshots.push((epoch, g.lsm()?));
        }
        Ok(())
    }

    fn split<'d>(&self, data: &'d [GridExample]) -> Result<(&'d [GridExample], &'d [GridExample])> {
        if data.len() < 2 {
            return Err(Error::Usage(format!(
                "a phase needs at least 2 examples to split train/validation, got {}",
                data.len()
            )));
        }
        let n_val = self.config.val_count(data.len());
        Ok(data.split_at(data.len() - n_val))
    }

    /// Eval-mode F1 on `examples`, batched and fanned out over the thread pool.
    pub fn evaluate_f1(&self, examples: &[GridExample]) -> Result<f64> {
        let confusion = examples
            .par_chunks(self.config.batch_size)
            .map(|chunk| {
                let refs: Vec<&GridExample> = chunk.iter().collect();
                let (x, y) = batch_tensors(&refs)?;
                Confusion::from_logits(&self.net.predict(&x)?, &y)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(Confusion::default(), Confusion::merge);
        Ok(confusion.f1())
    }

    /// Eval-mode mean loss (task plus regularizer) on `examples`.
    fn evaluate_loss(&self, examples: &[GridExample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in examples.chunks(self.config.batch_size) {
            let refs: Vec<&GridExample> = chunk.iter().collect();
            let (x, y) = batch_tensors(&refs)?;
            let mut tape = Tape::new();
            let bound = self.net.bind(&mut tape, false);
            let xv = tape.constant(x);
            let logits = self.net.forward_eval(&mut tape, &bound, xv)?;
            let task = tape.bce_with_logits(logits, &y)?;
            let loss = recurrence_regularized_loss(&mut tape, task, &bound.groups, self.config.lambda_r)?;
            total += tape.value(loss).item()? * chunk.len() as f64;
        }
        Ok(total / examples.len() as f64)
    }

    /// One optimizer step on a batch; returns the loss before the update.
    pub fn train_step(&mut self, inputs: Tensor, targets: &Tensor, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true);
        let x = tape.constant(inputs);
        let logits = self.net.forward_train(&mut tape, &bound, x)?;
        let task = tape.bce_with_logits(logits, targets)?;
        let loss = recurrence_regularized_loss(&mut tape, task, &bound.groups, self.config.lambda_r)?;
        let value = tape.value(loss).item()?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .params
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect();
        drop(tape);
        self.opt.step(&mut self.net.params_mut(), &grads, lr)?;
        Ok(value)
    }

    fn train_epoch(&mut self, train: &[GridExample], lr: f64) -> Result<f64> {
        let epoch = self.global_epoch() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let refs: Vec<&GridExample> = idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = batch_tensors(&refs)?;
            let loss = self.train_step(x, &y, lr).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    phase: self.position.phase,
                    epoch,
                    batch: b,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    phase: self.position.phase,
                    epoch,
                    batch: b,
                    loss,
                });
            }
            total += loss * idx.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    /// Trains from the current position through the last phase. `data[p]` is
    /// the example set of phase `p + 1`. The hook runs after every epoch.
    pub fn run(&mut self, data: &[Vec<GridExample>], hook: &mut EpochHook<'_>) -> Result<()> {
        let phases = self.config.curriculum.phases;
        if data.len() < phases {
            return Err(Error::Usage(format!(
                "{phases} curriculum phases but data for only {}",
                data.len()
            )));
        }
        if self.history.is_empty() {
            let (train, val) = self.split(&data[0])?;
            let row = EpochMetrics {
                phase: 1,
                epoch: 0,
                train_loss: self.evaluate_loss(train)?,
                val_f1: self.evaluate_f1(val)?,
                lr: self.config.schedule.lr_at(self.config.optimizer.lr, 0),
                lsm_offdiag_mean: self.lsm_mean()?,
            };
            self.snapshot(0)?;
            self.history.push(row.clone());
            if !hook(self, &row)? {
                return Ok(());
            }
        }
        let epochs = self.config.curriculum.epochs_per_phase;
        while !self.is_finished() {
            if self.position.epoch_in_phase >= epochs {
                self.position = Position {
                    phase: self.position.phase + 1,
                    epoch_in_phase: 0,
                };
                continue;
            }
            let (train, val) = self.split(&data[self.position.phase - 1])?;
            let lr = self
                .config
                .schedule
                .lr_at(self.config.optimizer.lr, self.global_epoch());
            let train_loss = self.train_epoch(train, lr)?;
            self.position.epoch_in_phase += 1;
            let epoch = self.global_epoch();
            let row = EpochMetrics {
                phase: self.position.phase,
                epoch,
                train_loss,
                val_f1: self.evaluate_f1(val)?,
                lr,
                lsm_offdiag_mean: self.lsm_mean()?,
            };
            self.snapshot(epoch)?;
            self.history.push(row.clone());
            if !hook(self, &row)? {
                break;
            }
        }
        Ok(())
    }

    /// Final validation F1 recorded for `phase`, if that phase has trained.
    pub fn phase_final_f1(&self, phase: usize) -> Option<f64> {
        self.history
            .iter()
            .rev()
            .find(|r| r.phase == phase && r.epoch > 0)
            .map(|r| r.val_f1)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = network_tensors(&self.net);
        let names: Vec<String> = self.net.params().into_iter().map(|(n, _, _)| n).collect();
        for (name, m) in names.iter().zip(&self.opt.m) {
            tensors.push((format!("opt.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&self.opt.v) {
            tensors.push((format!("opt.v.{name}"), v.clone()));
        }
        let meta = TrainMeta {
            spec: self.net.spec().clone(),
            strategy: self.net.strategy(),
            config: self.config.clone(),
            position: self.position,
            optimizer_steps: self.opt.steps,
            history: self.history.clone(),
        };
        Ok(Checkpoint {
            tensors,
            meta: serde_json::to_value(meta)?,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Rebuilds a trainer, network, and optimizer state from a checkpoint.
    /// LSM snapshots are not stored and restart empty.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut net = Network::new(meta.spec, CoefficientInit::Orthogonal, 0)?;
        net.set_strategy(meta.strategy);
        load_network_tensors(&mut net, ckpt)?;
        let mut trainer = Self::new(net, meta.config)?;
        trainer.position = meta.position;
        trainer.history = meta.history;
        trainer.opt.steps = meta.optimizer_steps;
        if meta.optimizer_steps > 0 {
            let shapes: Vec<(String, Vec<usize>)> = trainer
                .net
                .params()
                .into_iter()
                .map(|(n, _, t)| (n, t.shape().to_vec()))
                .collect();
            let fetch = |prefix: &str| -> Result<Vec<Tensor>> {
                shapes
                    .iter()
                    .map(|(n, s)| {
                        let key = format!("{prefix}.{n}");
                        let t = ckpt
                            .get(&key)
                            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{key}`")))?;
                        if t.shape() != s.as_slice() {
                            return Err(Error::TensorShape {
                                name: key,
                                expected: s.clone(),
                                found: t.shape().to_vec(),
                            });
                        }
                        Ok(t.clone())
                    })
                    .collect()
            };
            trainer.opt.m = fetch("opt.m")?;
            if ckpt.get(&format!("opt.v.{}", shapes[0].0)).is_some() {
                trainer.opt.v = fetch("opt.v")?;
            }
        }
        Ok(trainer)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Network described by a checkpoint, without optimizer state.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<Network> {
    Ok(Trainer::from_checkpoint(ckpt)?.net)
}
