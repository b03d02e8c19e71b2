use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::{Checkpoint, Provenance, TrainState};
use super::config::{lr_at, TrainConfig};
use super::loss::mse_loss;
use crate::arch::{ctnet_forward_graph, ModelConfig, ModelParams};
use crate::data::{add_awgn, augment, random_way, stream_rng, ImageBuffer, PatchDataset, Stream};
use crate::error::{Error, Result};
use crate::metrics::{denoise, psnr};
use crate::tensor::{Graph, Tensor};

pub const METRICS_HEADER: &str = "epoch,step,lr,loss,val_psnr";

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 0-based epoch.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let val = self.val_psnr.map(crate::metrics::format_db).unwrap_or_default();
        format!("{},{},{:e},{:.9e},{}", self.epoch, self.step, self.lr, self.loss, val)
    }
}

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

/// Stepwise training over a patch dataset.
///
/// Every random draw is a pure function of the seeds and the step number,
/// so a run is reproducible and can resume from a checkpoint.
pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub state: TrainState,
    data: &'a PatchDataset,
    validation: Vec<(ImageBuffer, ImageBuffer)>,
    steps_per_epoch: usize,
    epoch_loss: (f64, usize),
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ModelConfig,
        params: ModelParams,
        cfg: TrainConfig,
        data: &'a PatchDataset,
        validation: &[ImageBuffer],
    ) -> Result<Self> {
        let state = TrainState { adam: AdamState::new(&params), epoch: 0, seed: cfg.seed };
        Self::with_state(model, params, state, cfg, data, validation)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, data: &'a PatchDataset, validation: &[ImageBuffer]) -> Result<Self> {
        let state = ckpt.state.ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume".into()))?;
        Self::with_state(ckpt.config, ckpt.params, state, cfg, data, validation)
    }

    fn with_state(
        model: ModelConfig,
        params: ModelParams,
        state: TrainState,
        cfg: TrainConfig,
        data: &'a PatchDataset,
        validation: &[ImageBuffer],
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if data.channels() != model.image_channels {
            return Err(Error::Config(format!(
                "model expects {} channel images, dataset has {}",
                model.image_channels,
                data.channels()
            )));
        }
        let validation = validation
            .iter()
            .enumerate()
            .map(|(i, clean)| {
                if clean.channels != model.image_channels {
                    return Err(Error::Config("validation images have the wrong channel count".into()));
                }
                let mut rng = stream_rng(cfg.noise.seed, Stream::Validation, i as u64, 0);
                Ok((clean.clone(), add_awgn(clean, &cfg.noise, &mut rng).0))
            })
            .collect::<Result<_>>()?;
        let steps_per_epoch = (data.len() / cfg.batch_size).max(1);
        Ok(Trainer { model, cfg, params, state, data, validation, steps_per_epoch, epoch_loss: (0.0, 0) })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        let full = (self.cfg.epochs * self.steps_per_epoch) as u64;
        self.cfg.max_steps.map_or(full, |m| full.min(m as u64))
    }

    pub fn step_count(&self) -> u64 {
        self.state.adam.t
    }

    /// Clean and noisy `[N, C, H, W]` batch for step `t`.
    pub fn batch(&self, t: u64) -> Result<(Tensor, Tensor)> {
        let epoch = t / self.steps_per_epoch as u64;
        let j = (t % self.steps_per_epoch as u64) as usize;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, Stream::Batches, epoch, 0));
        let bs = self.cfg.batch_size;
        let picks: Vec<usize> = (0..bs).map(|k| order[(j * bs + k) % order.len()]).collect();
        let pairs: Vec<(ImageBuffer, ImageBuffer)> = picks
            .par_iter()
            .enumerate()
            .map(|(k, &idx)| {
                let patch = &self.data.patches[idx];
                let clean = if self.data.config.augment {
                    augment(patch, random_way(self.cfg.seed, t, k as u64))?
                } else {
                    patch.clone()
                };
                let mut rng = stream_rng(self.cfg.noise.seed, Stream::Noise, t, k as u64);
                let (noisy, _) = add_awgn(&clean, &self.cfg.noise, &mut rng);
                Ok((clean, noisy))
            })
            .collect::<Result<_>>()?;
        let (clean, noisy): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Ok((ImageBuffer::stack(&clean)?, ImageBuffer::stack(&noisy)?))
    }

    /// One optimizer step; returns the batch loss. On a non-finite loss or
    /// gradient the parameters and optimizer state are left untouched.
    pub fn step(&mut self) -> Result<f64> {
        let t = self.state.adam.t;
        let epoch = (t / self.steps_per_epoch as u64) as usize;
        let lr = lr_at(epoch, &self.cfg);
        let (clean, noisy) = self.batch(t)?;

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let x = g.constant(noisy);
        let target = g.constant(clean);
        let (pred, _) = ctnet_forward_graph(&mut g, &bound, &self.model, &x, false)?;
        let loss = mse_loss(&mut g, &pred, &target, self.cfg.loss)?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::Numeric { layer: "loss".into() });
        }
        g.backward(&loss)?;
        let mut grads = bound.grads(&g, &self.params);
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric { layer: "gradient".into() });
        }
        if let Some(clip) = self.cfg.grad_clip {
            let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        let adam = AdamConfig { beta1: self.cfg.beta1, beta2: self.cfg.beta2, eps: self.cfg.eps };
        adam_step(&mut self.params, &grads, &mut self.state.adam, lr, &adam)?;
        self.state.epoch = (self.state.adam.t / self.steps_per_epoch as u64) as usize;
        self.epoch_loss.0 += value;
        self.epoch_loss.1 += 1;
        Ok(value)
    }

    /// Mean PSNR of the model on the fixed noisy validation set.
    pub fn validation_psnr(&self) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let scores = self
            .validation
            .par_iter()
            .map(|(clean, noisy)| psnr(&denoise(&self.params, &self.model, noisy)?.quantized(), clean, 1.0))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Some(scores.iter().sum::<f64>() / scores.len() as f64))
    }

    /// Trains until the step budget is spent or `stop` returns true, calling
    /// `on_epoch` with the trainer after every finished (or final partial)
    /// epoch.
    pub fn run(&mut self, stop: &dyn Fn() -> bool, on_epoch: &mut dyn FnMut(&Self, &EpochLog)) -> Result<Vec<EpochLog>> {
        let total = self.total_steps();
        let mut logs = Vec::new();
        while self.step_count() < total && !stop() {
            let epoch = (self.step_count() / self.steps_per_epoch as u64) as usize;
            self.step()?;
            let t = self.step_count();
            if t % self.steps_per_epoch as u64 == 0 || t == total {
                let (sum, n) = std::mem::take(&mut self.epoch_loss);
                let log = EpochLog {
                    epoch,
                    step: t,
                    lr: lr_at(epoch, &self.cfg),
                    loss: sum / n as f64,
                    val_psnr: self.validation_psnr()?,
                };
                on_epoch(self, &log);
                logs.push(log);
            }
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            params: self.params.clone(),
            state: Some(self.state.clone()),
            provenance: Provenance::new(self.cfg.seed),
        }
    }
}

/// Trains from scratch and returns the final checkpoint with the epoch log.
pub fn train(
    model: &ModelConfig,
    params: ModelParams,
    data: &PatchDataset,
    validation: &[ImageBuffer],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model.clone(), params, cfg.clone(), data, validation)?;
    let logs = trainer.run(&|| false, &mut |_, _| {})?;
    Ok((trainer.checkpoint(), logs))
}
