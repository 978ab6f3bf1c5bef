//! Optimization loop, learning-rate schedule, checkpoints and logs.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dataset, MelSegment, SpeakerId};
use crate::model::{batch_tensor, Model};
use crate::objective::{loss_with_gradients, ObjectiveBreakdown};
use crate::seed::{indexed_seed, rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to zero over the whole run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub beta: f64,
    pub seed: u64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs (`0`: only at the end).
    pub checkpoint_every: usize,
    /// Linear KL warm-up length in steps (`0`: off).
    pub kl_warmup_steps: usize,
    /// Exponential parameter averaging decay, off when absent.
    pub ema_decay: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 10,
            learning_rate: 1e-3,
            schedule: LrSchedule::Cosine,
            beta: 1.0,
            seed: 0,
            grad_clip: 5.0,
            checkpoint_every: 0,
            kl_warmup_steps: 0,
            ema_decay: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be finite and >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("gradient clip must be >= 0"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config("ema_decay must lie in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("invalid Adam hyperparameters"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }

    pub fn beta_at(&self, step: usize) -> f64 {
        if self.kl_warmup_steps == 0 {
            self.beta
        } else {
            self.beta * ((step + 1) as f64 / self.kl_warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam moments plus the optional parameter average.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub ema: Option<Vec<Tensor<f32>>>,
}

impl OptimizerState {
    pub fn new(model: &Model<f32>, ema: bool) -> Self {
        let zeros = || model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
            ema: ema.then(|| model.params().tensors().to_vec()),
        }
    }
}

/// Per-step statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub learning_rate: f64,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
}

/// Scales `grads` in place to global norm at most `clip`; returns the norm
/// before and after.
pub fn clip_gradients(grads: &mut [Tensor<f32>], clip: f64) -> (f64, f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if clip > 0.0 && norm > clip {
        // a hair under the bound so f32 rounding cannot push it over
        let s = (clip / norm * (1.0 - 1e-6)) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        let after = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        (norm, after)
    } else {
        (norm, norm)
    }
}

/// Owns a model and its optimizer during training.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub state: OptimizerState,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub steps: Vec<StepStats>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(&model, config.ema_decay.is_some());
        Ok(Trainer {
            model,
            config,
            state,
            epoch: 0,
            history: Vec::new(),
            steps: Vec::new(),
        })
    }

    /// Continues from a checkpoint; `config` may extend the epoch count.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut state = ckpt.optimizer;
        if config.ema_decay.is_some() && state.ema.is_none() {
            state.ema = Some(ckpt.model.params().tensors().to_vec());
        }
        Ok(Trainer {
            model: ckpt.model,
            config,
            state,
            epoch: ckpt.meta.epoch,
            history: ckpt.meta.history,
            steps: Vec::new(),
        })
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    /// One optimization step on a batch.
    pub fn step(&mut self, batch: &[&MelSegment], total_steps: usize) -> Result<StepStats> {
        let x = batch_tensor::<f32>(batch)?;
        let ys: Vec<SpeakerId> = batch.iter().map(|s| s.speaker).collect();
        let step = self.state.step as usize;
        let beta = self.config.beta_at(step);
        let seed = indexed_seed(self.config.seed, "posterior", step as u64);
        let (b, mut grads) = loss_with_gradients(&self.model, &x, &ys, beta, seed)?;
        let (grad_norm, clipped_norm) = clip_gradients(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient norm at step {step}; loss={:.4e} per-level KL={:?}",
                b.loss, b.per_level_kl
            )));
        }
        let lr = self.config.learning_rate_at(step, total_steps);
        self.adam_update(&grads, lr);
        Ok(StepStats {
            step: self.state.step,
            loss: b.loss,
            rate: b.rate(),
            distortion: b.distortion,
            grad_norm,
            clipped_norm,
            learning_rate: lr,
        })
    }

    fn adam_update(&mut self, grads: &[Tensor<f32>], lr: f64) {
        let c = &self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (c.adam_beta1, c.adam_beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = (lr / bc1) as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let inv_bc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = c.adam_eps as f32;
        let params = self.model.params_mut().tensors_mut();
        for (i, g) in grads.iter().enumerate() {
            let p = params[i].data_mut();
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1f * m[j] + (1.0 - b1f) * gj;
                v[j] = b2f * v[j] + (1.0 - b2f) * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_bc2 + eps);
            }
        }
        if let (Some(ema), Some(d)) = (self.state.ema.as_mut(), c.ema_decay) {
            let d = d as f32;
            for (e, p) in ema.iter_mut().zip(self.model.params().tensors()) {
                for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
                    *a = d * *a + (1.0 - d) * b;
                }
            }
        }
    }

    /// Runs epochs `self.epoch + 1 ..= config.epochs` over `segments`.
    /// `on_epoch` sees each finished epoch (used for checkpoints and logs).
    pub fn run(
        &mut self,
        segments: &[MelSegment],
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if segments.is_empty() {
            return Err(Error::invalid("no training segments"));
        }
        if let Some(s) = segments.iter().find(|s| s.speaker.index() >= self.model.vocab_size()) {
            return Err(Error::config(format!(
                "segment speaker {} outside the model's {} speakers",
                s.speaker,
                self.model.vocab_size()
            )));
        }
        let per_epoch = self.steps_per_epoch(segments.len());
        let total = per_epoch * self.config.epochs;
        while self.epoch < self.config.epochs {
            let epoch = self.epoch + 1;
            let mut order: Vec<usize> = (0..segments.len()).collect();
            order.shuffle(&mut rng(indexed_seed(self.config.seed, "shuffle", epoch as u64)));
            let (mut loss, mut rate, mut dist) = (0.0, 0.0, 0.0);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&MelSegment> = chunk.iter().map(|&i| &segments[i]).collect();
                let s = self.step(&batch, total)?;
                let w = chunk.len() as f64;
                loss += w * s.loss;
                rate += w * s.rate;
                dist += w * s.distortion;
                self.steps.push(s);
            }
            let n = segments.len() as f64;
            let row = EpochLog {
                epoch,
                loss: loss / n,
                rate: rate / n,
                distortion: dist / n,
            };
            info!(
                "epoch {epoch}: loss {:.3} rate {:.3} distortion {:.3}",
                row.loss, row.rate, row.distortion
            );
            self.history.push(row);
            self.epoch = epoch;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// The model to use after training: the parameter average if enabled.
    pub fn final_model(&self) -> Model<f32> {
        let mut m = self.model.clone();
        if let Some(ema) = &self.state.ema {
            for (dst, src) in m.params_mut().tensors_mut().iter_mut().zip(ema) {
                *dst = src.clone();
            }
        }
        m
    }
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains on `dataset`, writing checkpoints, the log and the resolved
/// config into `out_dir` when given.
pub fn train(model: Model<f32>, dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Checkpoint> {
    let trainer = Trainer::new(model, cfg.clone())?;
    train_with(trainer, dataset, out_dir)
}

pub fn train_with(mut trainer: Trainer, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Checkpoint> {
    if trainer.model.vocab_size() != dataset.vocab().len() {
        return Err(Error::config(format!(
            "model has {} speakers but the dataset has {}",
            trainer.model.vocab_size(),
            dataset.vocab().len()
        )));
    }
    if trainer.model.config().segment_frames != dataset.segment_frames() {
        return Err(Error::config(format!(
            "model expects {}-frame segments, dataset has {}",
            trainer.model.config().segment_frames,
            dataset.segment_frames()
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let segments = dataset.segments();
    let every = trainer.config.checkpoint_every;
    trainer.run(&segments, |t| {
        let Some(dir) = out_dir else { return Ok(()) };
        write_log(&dir.join(LOG_FILE), &t.history)?;
        if every > 0 && t.epoch % every == 0 && t.epoch < t.config.epochs {
            save_checkpoint(&Checkpoint::from_trainer(t, dataset), &dir.join(format!("epoch{:04}.ckpt", t.epoch)))?;
        }
        Ok(())
    })?;
    let ckpt = Checkpoint::from_trainer(&trainer, dataset);
    if let Some(dir) = out_dir {
        write_log(&dir.join(LOG_FILE), &trainer.history)?;
        save_checkpoint(&ckpt, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(ckpt)
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch\tloss\trate\tdistortion\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", r.epoch, r.loss, r.rate, r.distortion));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean objective of a batch of segments under `model` (no update).
pub fn batch_objective(model: &Model<f32>, batch: &[&MelSegment], beta: f64, seed: u64) -> Result<ObjectiveBreakdown> {
    let x = batch_tensor::<f32>(batch)?;
    let ys: Vec<SpeakerId> = batch.iter().map(|s| s.speaker).collect();
    crate::objective::elbo_beta_batch(model, &x, &ys, beta, seed)
}

#[cfg(test)]
mod tests;
