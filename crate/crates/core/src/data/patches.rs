//! Random patch cropping and the eight dihedral augmentations.

use rand::Rng;

use super::image::ImageBuffer;
use super::noise::{stream_rng, Stream};
use crate::error::{Error, Result};

/// Uniformly random top-left corners `(y, x)` of `count` patches.
pub fn patch_corners<R: Rng>(height: usize, width: usize, size: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if size == 0 || size > height || size > width {
        return Err(Error::Data(format!("cannot cut {size}x{size} patches from a {height}x{width} image")));
    }
    Ok((0..count).map(|_| (rng.random_range(0..=height - size), rng.random_range(0..=width - size))).collect())
}

pub fn crop(img: &ImageBuffer, y: usize, x: usize, h: usize, w: usize) -> ImageBuffer {
    let mut data = Vec::with_capacity(h * w * img.channels);
    for c in 0..img.channels {
        for r in y..y + h {
            let start = (c * img.height + r) * img.width + x;
            data.extend_from_slice(&img.data[start..start + w]);
        }
    }
    ImageBuffer { height: h, width: w, channels: img.channels, data }
}

/// `count` random `size x size` crops, reproducible by `seed`.
pub fn extract_patches(img: &ImageBuffer, size: usize, count: usize, seed: u64) -> Result<Vec<ImageBuffer>> {
    extract_patches_for(img, size, count, seed, 0)
}

/// Crops for image number `image` of a dataset; each image has its own stream.
pub fn extract_patches_for(img: &ImageBuffer, size: usize, count: usize, seed: u64, image: u64) -> Result<Vec<ImageBuffer>> {
    let mut rng = stream_rng(seed, Stream::Patches, image, 0);
    let corners = patch_corners(img.height, img.width, size, count, &mut rng)?;
    Ok(corners.into_iter().map(|(y, x)| crop(img, y, x, size, size)).collect())
}

fn rot90_cw(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = (img.height, img.width);
    let mut out = ImageBuffer::zeros(w, h, img.channels);
    for c in 0..img.channels {
        for i in 0..w {
            for j in 0..h {
                out.data[(c * w + i) * h + j] = img.get(c, h - 1 - j, i);
            }
        }
    }
    out
}

fn flip_vertical(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            let src = (c * img.height + img.height - 1 - y) * img.width;
            let dst = (c * img.height + y) * img.width;
            out.data[dst..dst + img.width].copy_from_slice(&img.data[src..src + img.width]);
        }
    }
    out
}

/// Way `k` rotates clockwise by `k / 2` quarter turns, then flips top to
/// bottom when `k` is odd. Way 0 is the identity, way 2 a single clockwise
/// quarter turn.
pub fn augment(patch: &ImageBuffer, way: usize) -> Result<ImageBuffer> {
    if way > 7 {
        return Err(Error::Data(format!("augmentation way {way} is outside 0..=7")));
    }
    let mut out = patch.clone();
    for _ in 0..way / 2 {
        out = rot90_cw(&out);
    }
    if way % 2 == 1 {
        out = flip_vertical(&out);
    }
    Ok(out)
}

/// The way that undoes `way`.
pub fn inverse_way(way: usize) -> usize {
    if way % 2 == 1 {
        way // reflections are involutions
    } else {
        (8 - way) % 8
    }
}

/// The single way equal to applying `first`, then `second`.
pub fn compose_ways(first: usize, second: usize) -> usize {
    let (r1, f1, r2, f2) = (first / 2, first % 2, second / 2, second % 2);
    // F R^k = R^-k F
    let r = if f1 == 1 { (r1 + 4 - r2) % 4 } else { (r1 + r2) % 4 };
    2 * r + (f1 ^ f2)
}

/// Random way per patch drawn from the augmentation stream.
pub fn random_way(seed: u64, image: u64, patch: u64) -> usize {
    stream_rng(seed, Stream::Augment, image, patch).random_range(0..8)
}
