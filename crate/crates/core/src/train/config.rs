use serde::{Deserialize, Serialize};

use super::loss::LossReduction;
use crate::data::{NoiseSpec, PatchConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// 1-based epoch numbers at which the learning rate halves.
    pub halving_epochs: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub patch: PatchConfig,
    pub loss: LossReduction,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 33,
            lr0: 2e-4,
            halving_epochs: vec![15, 22, 24, 26, 28, 30, 31],
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            seed: 0,
            noise: NoiseSpec::fixed(25.0, 0),
            patch: PatchConfig::default(),
            loss: LossReduction::PerSample,
            grad_clip: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale run: 16x16 patches, 200 steps, a larger initial rate.
    pub fn tiny() -> Self {
        TrainConfig {
            lr0: 1e-3,
            patch: PatchConfig { patch_size: 16, patches_per_image: 8, augment: true },
            max_steps: Some(200),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad("lr0 must be a non-negative number");
        }
        if !self.halving_epochs.windows(2).all(|w| w[0] < w[1]) {
            return bad("halving_epochs must be strictly increasing");
        }
        if self.halving_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("halving_epochs must all be below epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if self.patch.patch_size == 0 || self.patch.patches_per_image == 0 {
            return bad("patch size and patches per image must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        self.noise.validate()
    }
}

/// Learning rate for the 0-based `epoch`: `lr0 / 2^k`, `k` counting the
/// halving epochs at or before the 1-based epoch number `epoch + 1`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.halving_epochs.iter().filter(|&&h| h <= epoch + 1).count();
    cfg.lr0 * 0.5f64.powi(k as i32)
}
