//! Additive white Gaussian noise.
//!
//! Every random stream is a ChaCha8 generator keyed by the 64-bit run seed,
//! with the ChaCha stream id derived from `(purpose, image id, patch id)`.
//! Normal deviates come from the Box–Muller transform on pairs of uniform
//! `f64` draws (`u1` in `(0, 1]`, `u2` in `[0, 1)`); both outputs of a pair
//! are used, cosine branch first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageBuffer;
use crate::error::{Error, Result};

/// Purposes that get independent random streams.
#[derive(Clone, Copy, Debug)]
#[repr(u8)]
pub enum Stream {
    Patches = 1,
    Augment = 2,
    Noise = 3,
    Batches = 4,
    Validation = 5,
    Eval = 6,
}

/// Random generator for one `(purpose, image, patch)` stream of a run.
pub fn stream_rng(seed: u64, purpose: Stream, image: u64, patch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a bijective mix keeps distinct triples on distinct stream ids
    let id = ((purpose as u64) << 56) ^ (image << 28) ^ patch;
    rng.set_stream(id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseLevel {
    Fixed { sigma: f64 },
    /// Per-patch sigma drawn uniformly from `[sigma_min, sigma_max]`.
    Blind { sigma_min: f64, sigma_max: f64 },
}

/// Noise model; sigma is a standard deviation in 8-bit units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub level: NoiseLevel,
    #[serde(default)]
    pub seed: u64,
    /// Clip noisy values to `[0, 1]` (off: the degradation is purely additive).
    #[serde(default)]
    pub clip: bool,
}

impl NoiseSpec {
    pub fn fixed(sigma: f64, seed: u64) -> Self {
        NoiseSpec { level: NoiseLevel::Fixed { sigma }, seed, clip: false }
    }

    /// Blind range used for the blind model: sigma from 0 to 55.
    pub fn blind_default(seed: u64) -> Self {
        Self::blind(0.0, 55.0, seed)
    }

    pub fn blind(sigma_min: f64, sigma_max: f64, seed: u64) -> Self {
        NoiseSpec { level: NoiseLevel::Blind { sigma_min, sigma_max }, seed, clip: false }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.level {
            NoiseLevel::Fixed { sigma } => sigma.is_finite() && sigma >= 0.0,
            NoiseLevel::Blind { sigma_min, sigma_max } => {
                sigma_min.is_finite() && sigma_max.is_finite() && 0.0 <= sigma_min && sigma_min <= sigma_max
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise level {:?}", self.level)))
        }
    }
}

/// Standard normal deviates by Box–Muller.
pub struct Gaussian<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> Gaussian<R> {
    pub fn new(rng: R) -> Self {
        Gaussian { rng, spare: None }
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Adds `N(0, (sigma/255)^2)` noise; returns the noisy image and the sigma used.
pub fn add_awgn<R: Rng>(clean: &ImageBuffer, spec: &NoiseSpec, rng: &mut R) -> (ImageBuffer, f64) {
    let sigma = match spec.level {
        NoiseLevel::Fixed { sigma } => sigma,
        NoiseLevel::Blind { sigma_min, sigma_max } => {
            if sigma_min == sigma_max {
                sigma_min
            } else {
                rng.random_range(sigma_min..=sigma_max)
            }
        }
    };
    let mut noisy = clean.clone();
    if sigma > 0.0 {
        let std = sigma / 255.0;
        let mut gauss = Gaussian::new(rng);
        for v in &mut noisy.data {
            *v += std * gauss.sample();
        }
    }
    if spec.clip {
        noisy.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    (noisy, sigma)
}

/// Noise for patch `patch` of image `image`, independent of processing order.
pub fn add_awgn_indexed(clean: &ImageBuffer, spec: &NoiseSpec, image: u64, patch: u64) -> (ImageBuffer, f64) {
    add_awgn(clean, spec, &mut stream_rng(spec.seed, Stream::Noise, image, patch))
}
