//! Clean-image ingestion, patch extraction, augmentation and noise synthesis.

mod image;
mod manifest;
mod noise;
mod patches;
mod synth;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::image::{load_image, quantize, save_image, ImageBuffer};
pub use manifest::{build_manifest, Manifest, ManifestEntry};
pub use noise::{add_awgn, add_awgn_indexed, stream_rng, Gaussian, NoiseLevel, NoiseSpec, Stream};
pub use patches::{augment, compose_ways, crop, extract_patches, extract_patches_for, inverse_way, patch_corners, random_way};
pub use synth::synth_image;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub patches_per_image: usize,
    /// Apply a random dihedral augmentation to every sampled patch.
    pub augment: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { patch_size: 48, patches_per_image: 108, augment: true }
    }
}

/// Clean training patches cut from a set of images.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub patches: Vec<ImageBuffer>,
    pub config: PatchConfig,
}

impl PatchDataset {
    /// Cuts `patches_per_image` crops from every image; image `i` uses its own
    /// random stream, so the result does not depend on thread scheduling.
    pub fn from_images(images: &[ImageBuffer], config: PatchConfig, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("dataset has no images".into()));
        }
        if let Some(bad) = images.iter().find(|i| i.channels != images[0].channels) {
            return Err(Error::Data(format!("dataset mixes {} and {} channel images", images[0].channels, bad.channels)));
        }
        let per_image: Vec<Vec<ImageBuffer>> = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| extract_patches_for(img, config.patch_size, config.patches_per_image, seed, i as u64))
            .collect::<Result<_>>()?;
        Ok(PatchDataset { patches: per_image.into_iter().flatten().collect(), config })
    }

    pub fn from_manifest(manifest: &Manifest, config: PatchConfig, seed: u64) -> Result<Self> {
        let images: Vec<ImageBuffer> = manifest.entries.par_iter().map(|e| load_image(&e.path)).collect::<Result<_>>()?;
        Self::from_images(&images, config, seed)
    }

    /// Uses already-cut patches as they are.
    pub fn from_patches(patches: Vec<ImageBuffer>, augment: bool) -> Result<Self> {
        let first = patches.first().ok_or_else(|| Error::Data("dataset has no patches".into()))?;
        if patches.iter().any(|p| !p.same_geometry(first)) {
            return Err(Error::Data("patches differ in size or channel count".into()));
        }
        let config = PatchConfig { patch_size: first.height, patches_per_image: 1, augment };
        Ok(PatchDataset { patches, config })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.patches.first().map_or(0, |p| p.channels)
    }
}
